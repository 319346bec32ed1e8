#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::io::load_fit_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = load_fit_bytes(data);
});
