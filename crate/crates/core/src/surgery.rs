//! The logit-shift attack and its verification.
//!
//! The attacked network computes `z'_i = z_i + t` with
//! `t = K * sum_k A[i0, j0, k]`, where `A` is a spatial activation (by
//! default the last max-pool). Since `t` is the same for every class the
//! softmax output, the post-softmax gradients and the cross-entropy
//! gradients are unchanged, while every pre-softmax gradient picks up
//! `dt/dA = K` at the tap cell.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Classifier, ForwardTrace, LogitShift, Network, ScoreKind, ScoreSelector, ShiftScope};
use crate::tensor::Tensor;
use crate::trainer::batch_loss_gradients;

/// Gain used unless overridden.
pub const DEFAULT_GAIN: f64 = 10.0;

/// Tolerance for post-softmax outputs and activation gradients.
pub const OUTPUT_TOLERANCE: f64 = 1e-10;
/// Tolerance for cross-entropy parameter gradients.
pub const PARAM_GRADIENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub tap_layer: String,
    pub row: usize,
    pub col: usize,
    pub gain: f64,
}

impl AttackConfig {
    /// Tap the last max-pool of `net` at `(0, 0)` with gain 10.
    pub fn default_for(net: &Network) -> Result<Self> {
        let tap = net
            .last_pool()
            .ok_or_else(|| Error::InvalidConfig("network has no max-pool layer to tap".to_string()))?;
        Ok(Self {
            tap_layer: net.activation_name(tap).to_string(),
            row: 0,
            col: 0,
            gain: DEFAULT_GAIN,
        })
    }

    fn to_shift(&self, net: &Network, scope: ShiftScope) -> Result<LogitShift> {
        let tap = net.activation_index(&self.tap_layer)?;
        let shift = LogitShift {
            tap,
            row: self.row,
            col: self.col,
            gain: self.gain,
            scope,
        };
        shift.validate(net)?;
        Ok(shift)
    }
}

/// A base network plus the parameter-free shift branch. The base is shared,
/// never copied, until someone asks to train it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedNetwork {
    base: Arc<Network>,
    config: AttackConfig,
    shift: LogitShift,
}

impl AttackedNetwork {
    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn shared_base(&self) -> &Arc<Network> {
        &self.base
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn scope(&self) -> ShiftScope {
        self.shift.scope
    }

    pub fn tap_index(&self) -> usize {
        self.shift.tap
    }

    /// Mutable access to the base parameters; clones the base if it is
    /// still shared.
    pub fn base_mut(&mut self) -> &mut Network {
        Arc::make_mut(&mut self.base)
    }

    /// Trainable parameters added by the attack.
    pub fn extra_parameter_count(&self) -> usize {
        0
    }
}

impl Classifier for AttackedNetwork {
    fn network(&self) -> &Network {
        &self.base
    }

    fn logit_shift(&self) -> Option<&LogitShift> {
        Some(&self.shift)
    }
}

/// Add the shift branch to `net`.
pub fn apply_logit_shift(net: Arc<Network>, config: &AttackConfig) -> Result<AttackedNetwork> {
    with_scope(net, config, ShiftScope::AllClasses)
}

/// Shift only class `class`. This breaks softmax invariance and exists so
/// the verification checks have something to fail on.
pub fn single_class_shift(net: Arc<Network>, config: &AttackConfig, class: usize) -> Result<AttackedNetwork> {
    with_scope(net, config, ShiftScope::SingleClass(class))
}

pub(crate) fn with_scope(net: Arc<Network>, config: &AttackConfig, scope: ShiftScope) -> Result<AttackedNetwork> {
    let shift = config.to_shift(&net, scope)?;
    Ok(AttackedNetwork {
        base: net,
        config: config.clone(),
        shift,
    })
}

/// `t = K * sum_k A[i0, j0, k]` read from a trace of `net`.
pub fn shift_term(net: &Network, trace: &ForwardTrace, config: &AttackConfig) -> Result<f64> {
    let shift = config.to_shift(net, ShiftScope::AllClasses)?;
    let acts = trace.activation(shift.tap);
    if acts.shape() != net.activation_shape(shift.tap) {
        return Err(Error::TraceMismatch(format!("activation `{}`", config.tap_layer)));
    }
    Ok(shift.value(acts))
}

/// A plain or attacked network, as loaded from a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(Arc<Network>),
    Attacked(AttackedNetwork),
}

impl Model {
    pub fn attack(&self) -> Option<(&AttackConfig, ShiftScope)> {
        match self {
            Model::Plain(_) => None,
            Model::Attacked(a) => Some((a.config(), a.scope())),
        }
    }

    pub fn base(&self) -> &Arc<Network> {
        match self {
            Model::Plain(n) => n,
            Model::Attacked(a) => a.shared_base(),
        }
    }
}

impl Classifier for Model {
    fn network(&self) -> &Network {
        self.base()
    }

    fn logit_shift(&self) -> Option<&LogitShift> {
        match self {
            Model::Plain(_) => None,
            Model::Attacked(a) => a.logit_shift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEquivalence {
    pub max_output_deviation: f64,
    pub prediction_agreement: f64,
    pub probe_count: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Max deviation of some gradient over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDeviation {
    pub max_deviation: f64,
    pub probe_count: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Combined result of the three equivalence checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub output: OutputEquivalence,
    pub postsoftmax_gradients: GradientDeviation,
    pub parameter_gradients: GradientDeviation,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.output.passed && self.postsoftmax_gradients.passed && self.parameter_gradients.passed
    }
}

/// Compare post-softmax outputs and predicted classes on every probe.
pub fn verify_output_equivalence(
    orig: &impl Classifier,
    atk: &impl Classifier,
    probes: &[Tensor],
    tol: f64,
) -> Result<OutputEquivalence> {
    if probes.is_empty() {
        return Err(Error::InvalidConfig("no probe inputs".to_string()));
    }
    let mut worst = 0.0f64;
    let mut agree = 0usize;
    for x in probes {
        let (a, b) = (orig.forward(x)?, atk.forward(x)?);
        worst = worst.max(a.probs().max_abs_diff(b.probs())?);
        if a.predicted_class() == b.predicted_class() {
            agree += 1;
        }
    }
    let agreement = agree as f64 / probes.len() as f64;
    Ok(OutputEquivalence {
        max_output_deviation: worst,
        prediction_agreement: agreement,
        probe_count: probes.len(),
        tolerance: tol,
        passed: worst <= tol && agree == probes.len(),
    })
}

/// Max elementwise deviation of `dS/dA` between the two networks over every
/// probe, class and activation, for scores of the given kind.
pub fn max_activation_gradient_deviation(
    orig: &impl Classifier,
    atk: &impl Classifier,
    probes: &[Tensor],
    kind: ScoreKind,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in probes {
        let (ta, tb) = (orig.forward(x)?, atk.forward(x)?);
        for class in 0..orig.network().class_count() {
            let sel = ScoreSelector { kind, class };
            let (ga, gb) = (
                orig.activation_gradients(&ta, sel)?,
                atk.activation_gradients(&tb, sel)?,
            );
            if ga.activations().len() != gb.activations().len() {
                return Err(Error::InvalidConfig("architectures differ".to_string()));
            }
            for (a, b) in ga.activations().iter().zip(gb.activations()) {
                worst = worst.max(a.max_abs_diff(b)?);
            }
        }
    }
    Ok(worst)
}

pub fn verify_postsoftmax_gradient_equality(
    orig: &impl Classifier,
    atk: &impl Classifier,
    probes: &[Tensor],
    tol: f64,
) -> Result<GradientDeviation> {
    if probes.is_empty() {
        return Err(Error::InvalidConfig("no probe inputs".to_string()));
    }
    let worst = max_activation_gradient_deviation(orig, atk, probes, ScoreKind::Post)?;
    Ok(GradientDeviation {
        max_deviation: worst,
        probe_count: probes.len(),
        tolerance: tol,
        passed: worst <= tol,
    })
}

/// `dz'_c/dA - dz_c/dA` at activation `target_layer`.
pub fn presoftmax_gradient_delta(
    orig: &impl Classifier,
    atk: &impl Classifier,
    input: &Tensor,
    target_layer: &str,
    class: usize,
) -> Result<Tensor> {
    let sel = ScoreSelector::pre(class);
    let (ta, tb) = (orig.forward(input)?, atk.forward(input)?);
    let ga = orig.activation_gradients(&ta, sel)?;
    let gb = atk.activation_gradients(&tb, sel)?;
    gb.activation_by_name(target_layer)?
        .sub(ga.activation_by_name(target_layer)?)
}

/// Compare batch-mean cross-entropy parameter gradients. `batches` holds
/// labeled inputs; every batch is checked separately.
pub fn verify_training_gradient_equality(
    orig: &impl Classifier,
    atk: &impl Classifier,
    batches: &[Vec<(Tensor, usize)>],
    tol: f64,
) -> Result<GradientDeviation> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(Error::InvalidConfig("empty training batch".to_string()));
    }
    let mut worst = 0.0f64;
    let mut count = 0;
    for batch in batches {
        let refs: Vec<(&Tensor, usize)> = batch.iter().map(|(x, y)| (x, *y)).collect();
        let (_, ga) = batch_loss_gradients(orig, &refs)?;
        let (_, gb) = batch_loss_gradients(atk, &refs)?;
        worst = worst.max(max_param_grad_diff(&ga, &gb)?);
        count += batch.len();
    }
    Ok(GradientDeviation {
        max_deviation: worst,
        probe_count: count,
        tolerance: tol,
        passed: worst <= tol,
    })
}

pub(crate) fn max_param_grad_diff(
    a: &[Option<crate::network::ParamGrad>],
    b: &[Option<crate::network::ParamGrad>],
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig("architectures differ".to_string()));
    }
    let mut worst = 0.0f64;
    for (pa, pb) in a.iter().zip(b) {
        match (pa, pb) {
            (Some(x), Some(y)) => {
                worst = worst
                    .max(x.weights.max_abs_diff(&y.weights)?)
                    .max(x.bias.max_abs_diff(&y.bias)?);
            }
            (None, None) => {}
            _ => return Err(Error::InvalidConfig("architectures differ".to_string())),
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerKind, LayerSpec};
    use crate::prng::Prng;

    fn random_tensor(rng: &mut Prng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn small_cnn(seed: u64) -> Network {
        let mut rng = Prng::new(seed);
        Network::new(
            vec![6, 6, 1],
            vec![
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d {
                        weights: random_tensor(&mut rng, &[3, 3, 3, 1], 0.5),
                        bias: random_tensor(&mut rng, &[3], 0.1),
                        stride: 1,
                        padding: 1,
                    },
                ),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new(
                    "pool",
                    LayerKind::MaxPool {
                        window: (2, 2),
                        stride: 2,
                    },
                ),
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new(
                    "fc",
                    LayerKind::Dense {
                        weights: random_tensor(&mut rng, &[3, 27], 0.3),
                        bias: random_tensor(&mut rng, &[3], 0.1),
                    },
                ),
            ],
        )
        .unwrap()
    }

    fn probes(seed: u64, n: usize) -> Vec<Tensor> {
        let mut rng = Prng::new(seed);
        (0..n)
            .map(|_| Tensor::new(vec![6, 6, 1], (0..36).map(|_| rng.next_f64()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn shift_term_examples() {
        // a 1x1x3 pool output holding [1.0, 2.0, 0.5]
        let net = Network::new(
            vec![1, 1, 3],
            vec![
                LayerSpec::new(
                    "pool",
                    LayerKind::MaxPool {
                        window: (1, 1),
                        stride: 1,
                    },
                ),
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new(
                    "fc",
                    LayerKind::Dense {
                        weights: Tensor::zeros(&[2, 3]),
                        bias: Tensor::zeros(&[2]),
                    },
                ),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let trace = net.forward(&x).unwrap();
        let mut cfg = AttackConfig::default_for(&net).unwrap();
        assert_eq!(cfg.tap_layer, "pool");
        assert_eq!(shift_term(&net, &trace, &cfg).unwrap(), 35.0);
        let zeros = net.forward(&Tensor::zeros(&[1, 1, 3])).unwrap();
        assert_eq!(shift_term(&net, &zeros, &cfg).unwrap(), 0.0);
        cfg.gain = 0.0;
        assert_eq!(shift_term(&net, &trace, &cfg).unwrap(), 0.0);
        cfg.row = 1;
        assert!(shift_term(&net, &trace, &cfg).is_err());
    }

    #[test]
    fn invalid_taps_are_rejected() {
        let net = Arc::new(small_cnn(1));
        let mut cfg = AttackConfig::default_for(&net).unwrap();
        cfg.tap_layer = "flat".into();
        assert!(matches!(apply_logit_shift(net.clone(), &cfg), Err(Error::Layer { .. })));
        cfg.tap_layer = "nope".into();
        assert!(matches!(
            apply_logit_shift(net.clone(), &cfg),
            Err(Error::UnknownLayer(_))
        ));
        cfg.tap_layer = "pool".into();
        cfg.col = 3;
        let msg = apply_logit_shift(net.clone(), &cfg).unwrap_err().to_string();
        assert!(msg.contains("3x3"), "{msg}");
        cfg.col = 0;
        cfg.gain = f64::NAN;
        assert!(apply_logit_shift(net, &cfg).is_err());
    }

    #[test]
    fn zero_gain_is_the_identity() {
        let net = Arc::new(small_cnn(2));
        let mut cfg = AttackConfig::default_for(&net).unwrap();
        cfg.gain = 0.0;
        let atk = apply_logit_shift(net.clone(), &cfg).unwrap();
        let ps = probes(3, 10);
        for x in &ps {
            let (a, b) = (net.forward(x).unwrap(), atk.forward(x).unwrap());
            assert_eq!(a.logits(), b.logits());
            assert_eq!(a.probs(), b.probs());
        }
        let dev = verify_postsoftmax_gradient_equality(net.as_ref(), &atk, &ps, 0.0).unwrap();
        assert_eq!(dev.max_deviation, 0.0);
        let delta = presoftmax_gradient_delta(net.as_ref(), &atk, &ps[0], "relu", 1).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attack_shares_parameters_and_adds_none() {
        let net = Arc::new(small_cnn(4));
        let atk = apply_logit_shift(net.clone(), &AttackConfig::default_for(&net).unwrap()).unwrap();
        assert!(Arc::ptr_eq(&net, atk.shared_base()));
        assert_eq!(atk.extra_parameter_count(), 0);
        assert_eq!(atk.network().parameter_count(), net.parameter_count());
    }

    #[test]
    fn outputs_equal_and_logits_shifted() {
        let net = Arc::new(small_cnn(5));
        let cfg = AttackConfig::default_for(&net).unwrap();
        let atk = apply_logit_shift(net.clone(), &cfg).unwrap();
        for x in probes(6, 20) {
            let (a, b) = (net.forward(&x).unwrap(), atk.forward(&x).unwrap());
            let t = shift_term(&net, &a, &cfg).unwrap();
            assert_eq!(b.shift(), Some(t));
            for (za, zb) in a.logits().data().iter().zip(b.logits().data()) {
                assert_eq!(*zb, za + t);
            }
            assert!(a.probs().max_abs_diff(b.probs()).unwrap() <= 1e-12);
        }
        let same = verify_output_equivalence(net.as_ref(), net.as_ref(), &probes(7, 5), 0.0).unwrap();
        assert_eq!(same.max_output_deviation, 0.0);
        assert!(same.passed);
    }

    #[test]
    fn tap_gradient_delta_is_gain_at_tap_cell() {
        let net = Arc::new(small_cnn(8));
        let mut cfg = AttackConfig::default_for(&net).unwrap();
        cfg.row = 1;
        cfg.col = 2;
        cfg.gain = 10.0;
        let atk = apply_logit_shift(net.clone(), &cfg).unwrap();
        for x in probes(9, 5) {
            for class in 0..3 {
                let d = presoftmax_gradient_delta(net.as_ref(), &atk, &x, "pool", class).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        for k in 0..3 {
                            let expect = if (i, j) == (1, 2) { 10.0 } else { 0.0 };
                            assert!((d.get(&[i, j, k]) - expect).abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_class_shift_breaks_equivalence() {
        let net = Arc::new(small_cnn(10));
        let cfg = AttackConfig::default_for(&net).unwrap();
        let bad = single_class_shift(net.clone(), &cfg, 0).unwrap();
        let ps = probes(11, 20);
        let out = verify_output_equivalence(net.as_ref(), &bad, &ps, OUTPUT_TOLERANCE).unwrap();
        assert!(!out.passed);
        assert!(out.max_output_deviation > 1e-3);
        assert!(single_class_shift(net, &cfg, 3).is_err());
    }

    #[test]
    fn dense_training_gradient_matches_closed_form() {
        // 1x1 identity pool in front of a dense layer: a spatial tap on an
        // otherwise dense-only network.
        let w = vec![0.2, -0.4, 0.1, 0.3, 0.5, -0.6];
        let net = Arc::new(
            Network::new(
                vec![1, 1, 3],
                vec![
                    LayerSpec::new(
                        "pool",
                        LayerKind::MaxPool {
                            window: (1, 1),
                            stride: 1,
                        },
                    ),
                    LayerSpec::new("flat", LayerKind::Flatten),
                    LayerSpec::new(
                        "fc",
                        LayerKind::Dense {
                            weights: Tensor::new(vec![2, 3], w).unwrap(),
                            bias: Tensor::vector(&[0.05, -0.05]),
                        },
                    ),
                ],
            )
            .unwrap(),
        );
        let atk = apply_logit_shift(net.clone(), &AttackConfig::default_for(&net).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 1, 3], vec![0.7, -0.3, 1.1]).unwrap();
        let label = 1;
        let y = net.forward(&x).unwrap().probs().data().to_vec();
        for model in [&Model::Plain(net.clone()), &Model::Attacked(atk.clone())] {
            let (_, grads) = model.loss_gradients(&x, label).unwrap();
            let g = grads[2].as_ref().unwrap();
            for (o, yo) in y.iter().enumerate() {
                let r = yo - if o == label { 1.0 } else { 0.0 };
                assert!((g.bias.data()[o] - r).abs() <= 1e-12);
                for i in 0..3 {
                    assert!((g.weights.get(&[o, i]) - r * x.data()[i]).abs() <= 1e-12);
                }
            }
        }
        let batch = vec![vec![(x, label)]];
        let dev = verify_training_gradient_equality(net.as_ref(), &atk, &batch, PARAM_GRADIENT_TOLERANCE).unwrap();
        assert!(dev.passed, "{dev:?}");
    }
}
