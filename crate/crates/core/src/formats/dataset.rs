//! Manifest for an exported image directory.
//!
//! ```json
//! {"format": "logitshift-dataset", "version": 1, "seed": 7, "image_size": 32,
//!  "images": [{"file": "img_00000.pgm", "label": 0}]}
//! ```
//!
//! File names are bare names inside the manifest's directory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "logitshift-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub file: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Generator seed, absent for hand-assembled directories.
    pub seed: Option<u64>,
    pub image_size: usize,
    pub images: Vec<DatasetEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDoc {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    image_size: usize,
    images: Vec<DatasetEntry>,
}

pub fn write_dataset(manifest: &DatasetManifest) -> String {
    let doc = DatasetDoc {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        seed: manifest.seed,
        image_size: manifest.image_size,
        images: manifest.images.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("dataset manifest serializes");
    text.push('\n');
    text
}

pub fn parse_dataset(bytes: &[u8]) -> Result<DatasetManifest> {
    let doc: DatasetDoc = serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("dataset manifest: {e}")))?;
    if doc.format != DATASET_FORMAT || doc.version != DATASET_VERSION {
        return Err(Error::Parse(format!(
            "unsupported dataset manifest {} v{}",
            doc.format, doc.version
        )));
    }
    for entry in &doc.images {
        let f = &entry.file;
        if f.is_empty() || f == "." || f == ".." || f.contains(['/', '\\', '\0']) {
            return Err(Error::Parse(format!("image file `{f}` must be a bare file name")));
        }
    }
    Ok(DatasetManifest {
        seed: doc.seed,
        image_size: doc.image_size,
        images: doc.images,
    })
}
