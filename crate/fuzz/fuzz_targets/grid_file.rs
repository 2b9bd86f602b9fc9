#![no_main]

use libfuzzer_sys::fuzz_target;
use logitshift::formats::grid::{parse_grid, write_grid};

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = parse_grid(data) {
        assert_eq!(parse_grid(write_grid(&grid).as_bytes()).expect("round trip"), grid);
    }
});
