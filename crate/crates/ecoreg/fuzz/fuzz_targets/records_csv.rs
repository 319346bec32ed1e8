#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::data_model::{Schema, VariableSpec};
use ecoreg::io::read_records_csv;

fuzz_target!(|data: &[u8]| {
    let schema = Schema::new(
        vec![
            VariableSpec::categorical("sex", ["m", "w"], "m"),
            VariableSpec::real("age"),
        ],
        vec![],
    )
    .unwrap();
    let _ = read_records_csv(data, &schema);
});
