//! JSON model manifest.
//!
//! ```json
//! {
//!   "format": "logitshift-model",
//!   "version": 1,
//!   "input_shape": [32, 32, 1],
//!   "class_count": 4,
//!   "layers": [
//!     {"type": "conv2d", "name": "conv1", "stride": 1, "padding": 1,
//!      "weights": [[[[...]]]], "bias": [...]},
//!     {"type": "relu", "name": "relu1"},
//!     {"type": "maxpool", "name": "pool1", "window": [2, 2], "stride": 2},
//!     {"type": "flatten", "name": "flatten"},
//!     {"type": "dense", "name": "dense", "weights": [[...]], "bias": [...]}
//!   ],
//!   "attack": {"tap_layer": "pool2", "i0": 0, "j0": 0, "k": 10.0}
//! }
//! ```
//!
//! Numbers are written in shortest round-trip form, so parsing a written
//! file reproduces every parameter bit for bit. The `attack` stanza is
//! optional; `shifted_class` inside it marks a single-class negative control.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{tensor_from_json, tensor_to_json};
use crate::error::{Error, Result};
use crate::network::ShiftScope;
use crate::network::{LayerKind, LayerSpec, Network};
use crate::surgery::{self, AttackConfig, Model};

pub const MODEL_FORMAT: &str = "logitshift-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack: Option<AttackStanza>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerDoc {
    Conv2d {
        name: String,
        stride: usize,
        padding: usize,
        weights: Value,
        bias: Value,
    },
    Relu {
        name: String,
    },
    Maxpool {
        name: String,
        window: [usize; 2],
        stride: usize,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        weights: Value,
        bias: Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackStanza {
    pub tap_layer: String,
    pub i0: usize,
    pub j0: usize,
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifted_class: Option<usize>,
}

impl AttackStanza {
    pub fn config(&self) -> AttackConfig {
        AttackConfig {
            tap_layer: self.tap_layer.clone(),
            row: self.i0,
            col: self.j0,
            gain: self.k,
        }
    }
}

fn to_doc(layer: &LayerSpec) -> LayerDoc {
    let name = layer.name.clone();
    match &layer.kind {
        LayerKind::Conv2d {
            weights,
            bias,
            stride,
            padding,
        } => LayerDoc::Conv2d {
            name,
            stride: *stride,
            padding: *padding,
            weights: tensor_to_json(weights),
            bias: tensor_to_json(bias),
        },
        LayerKind::Relu => LayerDoc::Relu { name },
        LayerKind::MaxPool { window, stride } => LayerDoc::Maxpool {
            name,
            window: [window.0, window.1],
            stride: *stride,
        },
        LayerKind::Flatten => LayerDoc::Flatten { name },
        LayerKind::Dense { weights, bias } => LayerDoc::Dense {
            name,
            weights: tensor_to_json(weights),
            bias: tensor_to_json(bias),
        },
    }
}

fn from_doc(doc: LayerDoc) -> Result<LayerSpec> {
    Ok(match doc {
        LayerDoc::Conv2d {
            name,
            stride,
            padding,
            weights,
            bias,
        } => {
            let kind = LayerKind::Conv2d {
                weights: tensor_from_json(&weights, 4, &format!("{name}.weights"))?,
                bias: tensor_from_json(&bias, 1, &format!("{name}.bias"))?,
                stride,
                padding,
            };
            LayerSpec::new(name, kind)
        }
        LayerDoc::Relu { name } => LayerSpec::new(name, LayerKind::Relu),
        LayerDoc::Maxpool { name, window, stride } => LayerSpec::new(
            name,
            LayerKind::MaxPool {
                window: (window[0], window[1]),
                stride,
            },
        ),
        LayerDoc::Flatten { name } => LayerSpec::new(name, LayerKind::Flatten),
        LayerDoc::Dense { name, weights, bias } => {
            let kind = LayerKind::Dense {
                weights: tensor_from_json(&weights, 2, &format!("{name}.weights"))?,
                bias: tensor_from_json(&bias, 1, &format!("{name}.bias"))?,
            };
            LayerSpec::new(name, kind)
        }
    })
}

/// Serialize a network with an optional attack stanza.
pub fn write_model(net: &Network, attack: Option<&AttackStanza>) -> String {
    let manifest = Manifest {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        input_shape: net.input_shape().to_vec(),
        class_count: net.class_count(),
        layers: net.layers().iter().map(to_doc).collect(),
        attack: attack.cloned(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    text
}

/// Serialize any model, including its attack stanza when attacked.
pub fn write(model: &Model) -> String {
    let stanza = model.attack().map(|(cfg, scope)| AttackStanza {
        tap_layer: cfg.tap_layer.clone(),
        i0: cfg.row,
        j0: cfg.col,
        k: cfg.gain,
        shifted_class: match scope {
            ShiftScope::AllClasses => None,
            ShiftScope::SingleClass(c) => Some(c),
        },
    });
    write_model(model.base(), stanza.as_ref())
}

/// Parse a manifest into its network and optional attack stanza.
pub fn parse_manifest(bytes: &[u8]) -> Result<(Network, Option<AttackStanza>)> {
    let manifest: Manifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("model manifest: {e}")))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Parse(format!("unexpected format tag `{}`", manifest.format)));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Parse(format!("unsupported model version {}", manifest.version)));
    }
    let layers = manifest.layers.into_iter().map(from_doc).collect::<Result<Vec<_>>>()?;
    let net = Network::new(manifest.input_shape, layers)?;
    if net.class_count() != manifest.class_count {
        return Err(Error::Parse(format!(
            "class_count {} disagrees with final layer width {}",
            manifest.class_count,
            net.class_count()
        )));
    }
    Ok((net, manifest.attack))
}

/// Parse a manifest into a ready-to-run model.
pub fn parse(bytes: &[u8]) -> Result<Model> {
    let (net, attack) = parse_manifest(bytes)?;
    let net = Arc::new(net);
    Ok(match attack {
        None => Model::Plain(net),
        Some(stanza) => {
            let cfg = stanza.config();
            Model::Attacked(match stanza.shifted_class {
                None => surgery::apply_logit_shift(net, &cfg)?,
                Some(c) => surgery::single_class_shift(net, &cfg, c)?,
            })
        }
    })
}
