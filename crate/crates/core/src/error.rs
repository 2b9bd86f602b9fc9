use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trace does not belong to this network: {0}")]
    TraceMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn layer(layer: &str, reason: impl Into<String>) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            reason: reason.into(),
        }
    }
}
