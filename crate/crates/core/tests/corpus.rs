//! Every checked-in fuzz seed is a valid input for its parser.

use std::fs;
use std::path::PathBuf;

use logitshift::formats::{dataset, grid, model, pnm};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn model_seeds_parse_and_round_trip() {
    for (name, bytes) in seeds("model_manifest") {
        let m = model::parse(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(model::parse(model::write(&m).as_bytes()).unwrap(), m, "{name}");
    }
}

#[test]
fn pnm_seeds_decode() {
    for (name, bytes) in seeds("pnm_decode") {
        let img = pnm::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(img.samples.len(), img.width * img.height * img.channels, "{name}");
    }
}

#[test]
fn grid_and_dataset_seeds_parse() {
    for (name, bytes) in seeds("grid_file") {
        grid::parse_grid(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("dataset_manifest") {
        dataset::parse_dataset(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
