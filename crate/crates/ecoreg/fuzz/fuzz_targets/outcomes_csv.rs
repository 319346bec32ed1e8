#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::io::read_outcomes_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_outcomes_csv(data);
});
