//! Raw heatmap values, saved next to every rendered image so comparison
//! metrics can be recomputed without re-running a model.
//!
//! ```json
//! {"format": "logitshift-grid", "version": 1, "method": "gradcam",
//!  "variant": "elementwise", "score": "pre", "class": 2, "layer": "pool2",
//!  "zero_map": false, "values": [[0.0, 1.5], [0.25, 0.0]]}
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{tensor_from_json, tensor_to_json};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRID_FORMAT: &str = "logitshift-grid";
pub const GRID_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub method: String,
    pub variant: Option<String>,
    pub score: String,
    pub class: usize,
    pub layer: String,
    pub zero_map: bool,
    /// `H x W` values.
    pub values: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    format: String,
    version: u32,
    method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    score: String,
    class: usize,
    layer: String,
    zero_map: bool,
    values: Value,
}

pub fn write_grid(grid: &GridFile) -> String {
    let doc = GridDoc {
        format: GRID_FORMAT.to_string(),
        version: GRID_VERSION,
        method: grid.method.clone(),
        variant: grid.variant.clone(),
        score: grid.score.clone(),
        class: grid.class,
        layer: grid.layer.clone(),
        zero_map: grid.zero_map,
        values: tensor_to_json(&grid.values),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("grid serializes");
    text.push('\n');
    text
}

pub fn parse_grid(bytes: &[u8]) -> Result<GridFile> {
    let doc: GridDoc = serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("grid file: {e}")))?;
    if doc.format != GRID_FORMAT || doc.version != GRID_VERSION {
        return Err(Error::Parse(format!(
            "unsupported grid file {} v{}",
            doc.format, doc.version
        )));
    }
    Ok(GridFile {
        method: doc.method,
        variant: doc.variant,
        score: doc.score,
        class: doc.class,
        layer: doc.layer,
        zero_map: doc.zero_map,
        values: tensor_from_json(&doc.values, 2, "values")?,
    })
}
