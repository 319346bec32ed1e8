#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::io::read_crosswalk_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_crosswalk_csv(data);
});
