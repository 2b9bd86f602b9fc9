//! Logit-shift surgery for CNN classifiers.
//!
//! Adding the same input-dependent scalar `t` to every logit leaves the
//! softmax output, its gradients and the training loss gradients unchanged,
//! but moves every gradient of a logit by `dt/dx`. This crate builds small
//! CNNs with an exact reverse-mode pass, applies such a shift (tapping a
//! pooled activation at a chosen cell), and measures what it does to
//! saliency, Grad-CAM and integrated-gradients attributions computed from
//! pre- versus post-softmax scores.

pub mod attribution;
pub mod error;
pub mod formats;
pub mod network;
pub mod prng;
pub mod surgery;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{Classifier, ForwardTrace, GradientSet, LayerKind, LayerSpec, Network, ScoreKind, ScoreSelector};
pub use surgery::{AttackConfig, AttackedNetwork, Model};
pub use tensor::Tensor;
