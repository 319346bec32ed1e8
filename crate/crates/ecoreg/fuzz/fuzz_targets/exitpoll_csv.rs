#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::io::read_exitpoll_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_exitpoll_csv(data);
});
