#![no_main]

use libfuzzer_sys::fuzz_target;
use logitshift::formats::dataset::{parse_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_dataset(data) {
        assert_eq!(parse_dataset(write_dataset(&m).as_bytes()).expect("round trip"), m);
    }
});
