#![no_main]

use libfuzzer_sys::fuzz_target;

use ecoreg::inference::SubgroupQuery;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Parsing must never panic; on success the query must survive a
        // matching pass over an empty record.
        if let Ok(q) = SubgroupQuery::parse("fuzz", text) {
            let record = ecoreg::data_model::Record {
                region_id: "r".into(),
                weight: 1.0,
                values: Default::default(),
            };
            let _ = q.matches(&record);
        }
    }
});
