//! Feed-forward CNN classifier with a hand-written reverse-mode pass.
//!
//! Activations are indexed `0..=L`: index 0 is the input and index `l + 1`
//! is the output of layer `l`. The network's last layer emits the logits
//! `z`; the softmax is applied at scoring time and never stored as a layer,
//! so both the pre- and the post-softmax score are always addressable.
//!
//! A [`LogitShift`] is the structural "tap + add" node used by the surgery
//! module: it reads the channel sum at one spatial cell of some activation
//! and adds `gain * sum` to the logits before the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax_first, Tensor};

/// Name reserved for the network input in activation lookups.
pub const INPUT: &str = "input";

/// Upper bound on the element count of any single activation.
pub const MAX_ACTIVATION_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `weights` is `out_ch x kh x kw x in_ch`, `bias` is `out_ch`.
    Conv2d {
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: usize,
    },
    Flatten,
    /// `weights` is `out x in`, `bias` is `out`.
    Dense {
        weights: Tensor,
        bias: Tensor,
    },
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Validated classifier. Parameters can be updated in place by the trainer
/// but the architecture is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    class_count: usize,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let elements = input_shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if input_shape.is_empty() || input_shape.contains(&0) || elements.is_none_or(|n| n > MAX_ACTIVATION_ELEMENTS) {
            return Err(Error::InvalidShape(format!("network input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.name == INPUT || layer.name.is_empty() {
                return Err(Error::layer(&layer.name, "reserved or empty layer name"));
            }
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::layer(&layer.name, "duplicate layer name"));
            }
            let out = output_shape(layer, shapes.last().unwrap())?;
            let elements = out.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if elements.is_none_or(|n| n > MAX_ACTIVATION_ELEMENTS) {
                return Err(Error::layer(
                    &layer.name,
                    format!("activation shape {out:?} is too large"),
                ));
            }
            shapes.push(out);
        }
        let class_count = match layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Dense { weights, .. },
                ..
            }) => weights.shape()[0],
            _ => return Err(Error::InvalidConfig("the final layer must be dense".to_string())),
        };
        Ok(Self {
            input_shape,
            layers,
            shapes,
            class_count,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Shape of activation `index` (0 = input).
    pub fn activation_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn activation_count(&self) -> usize {
        self.shapes.len()
    }

    /// Activation index for a layer name, with [`INPUT`] mapping to 0.
    pub fn activation_index(&self, name: &str) -> Result<usize> {
        if name == INPUT {
            return Ok(0);
        }
        self.layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn activation_name(&self, index: usize) -> &str {
        if index == 0 {
            INPUT
        } else {
            &self.layers[index - 1].name
        }
    }

    /// Activation index of the last max-pool layer, if any.
    pub fn last_pool(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::MaxPool { .. }))
            .map(|i| i + 1)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d { weights, bias, .. } | LayerKind::Dense { weights, bias } => {
                    weights.len() + bias.len()
                }
                _ => 0,
            })
            .sum()
    }

    /// `(weights, bias)` per layer, `None` for parameter-free layers.
    pub fn params(&self) -> Vec<Option<(&Tensor, &Tensor)>> {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d { weights, bias, .. } | LayerKind::Dense { weights, bias } => Some((weights, bias)),
                _ => None,
            })
            .collect()
    }

    /// Plain gradient step `theta -= lr * grad` on every parameter.
    pub fn sgd_step(&mut self, grads: &[Option<ParamGrad>], lr: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::TraceMismatch("gradient list length".to_string()));
        }
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            match (&mut layer.kind, grad) {
                (LayerKind::Conv2d { weights, bias, .. } | LayerKind::Dense { weights, bias }, Some(g)) => {
                    if g.weights.shape() != weights.shape() || g.bias.shape() != bias.shape() {
                        return Err(Error::layer(&layer.name, "gradient shape mismatch"));
                    }
                    for (w, d) in weights.data_mut().iter_mut().zip(g.weights.data()) {
                        *w -= lr * d;
                    }
                    for (b, d) in bias.data_mut().iter_mut().zip(g.bias.data()) {
                        *b -= lr * d;
                    }
                }
                (kind, None) if !kind.has_params() => {}
                _ => return Err(Error::layer(&layer.name, "gradient/parameter mismatch")),
            }
        }
        Ok(())
    }

    /// Largest absolute difference between corresponding parameters.
    pub fn max_param_diff(&self, other: &Network) -> Result<f64> {
        let (a, b) = (self.params(), other.params());
        if a.len() != b.len() {
            return Err(Error::InvalidConfig("architectures differ".to_string()));
        }
        let mut worst = 0.0f64;
        for (pa, pb) in a.iter().zip(&b) {
            match (pa, pb) {
                (Some((wa, ba)), Some((wb, bb))) => {
                    worst = worst.max(wa.max_abs_diff(wb)?).max(ba.max_abs_diff(bb)?);
                }
                (None, None) => {}
                _ => return Err(Error::InvalidConfig("architectures differ".to_string())),
            }
        }
        Ok(worst)
    }

    /// Forward pass of the plain network.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardTrace> {
        self.forward_with(input, None)
    }

    /// Forward pass, optionally adding a logit shift before the softmax.
    pub fn forward_with(&self, input: &Tensor, shift: Option<&LogitShift>) -> Result<ForwardTrace> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::layer(
                INPUT,
                format!("expected input shape {:?}, got {:?}", self.input_shape, input.shape()),
            ));
        }
        if let Some(s) = shift {
            s.validate(self)?;
        }
        let mut activations = Vec::with_capacity(self.shapes.len());
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for layer in &self.layers {
            let (out, argmax) = layer_forward(layer, activations.last().unwrap())?;
            activations.push(out);
            pool_argmax.push(argmax);
        }
        let raw = activations.last().unwrap().data().to_vec();
        let (logits, shift_value) = apply_shift(&raw, shift, &activations);
        let probs = softmax(&logits)?;
        Ok(ForwardTrace {
            names: (0..self.shapes.len())
                .map(|i| self.activation_name(i).to_string())
                .collect(),
            activations,
            pool_argmax,
            shift: shift_value,
            logits: Tensor::vector(&logits),
            probs: Tensor::vector(&probs),
        })
    }

    /// Re-run the layers after activation `start` with `activation` in its
    /// place and return the (shifted) logits. `trace` supplies the tap value
    /// when the tap lies upstream of `start`.
    pub fn logits_from(
        &self,
        start: usize,
        activation: &Tensor,
        trace: &ForwardTrace,
        shift: Option<&LogitShift>,
    ) -> Result<Vec<f64>> {
        if activation.shape() != self.shapes[start].as_slice() {
            return Err(Error::ShapeMismatch {
                left: self.shapes[start].clone(),
                right: activation.shape().to_vec(),
            });
        }
        // Keep every activation from `start` on so the tap can be read.
        let mut acts: Vec<Tensor> = trace.activations[..start].to_vec();
        acts.push(activation.clone());
        for layer in &self.layers[start..] {
            let (out, _) = layer_forward(layer, acts.last().unwrap())?;
            acts.push(out);
        }
        let raw = acts.last().unwrap().data().to_vec();
        Ok(apply_shift(&raw, shift, &acts).0)
    }

    /// Reverse-mode gradients of the selected score.
    pub fn backward(&self, trace: &ForwardTrace, sel: ScoreSelector) -> Result<GradientSet> {
        self.backward_with(trace, sel, None)
    }

    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        sel: ScoreSelector,
        shift: Option<&LogitShift>,
    ) -> Result<GradientSet> {
        let dz = trace.score_gradient(sel)?;
        self.backward_from_logit_grad(trace, &dz, shift, true)
    }

    /// Back-propagate a gradient `dz` on the (shifted) logits through the
    /// shift node and every layer. Parameter gradients are skipped unless
    /// `with_params`.
    pub fn backward_from_logit_grad(
        &self,
        trace: &ForwardTrace,
        dz: &[f64],
        shift: Option<&LogitShift>,
        with_params: bool,
    ) -> Result<GradientSet> {
        self.check_trace(trace)?;
        if trace.shift.is_some() != shift.is_some() {
            return Err(Error::TraceMismatch(
                "trace and backward disagree on the logit shift".to_string(),
            ));
        }
        if dz.len() != self.class_count {
            return Err(Error::ShapeMismatch {
                left: vec![self.class_count],
                right: vec![dz.len()],
            });
        }
        let n_layers = self.layers.len();
        let mut act_grads: Vec<Option<Tensor>> = vec![None; n_layers + 1];
        let mut param_grads: Vec<Option<ParamGrad>> = vec![None; n_layers];

        // z' = z + t: the raw logits receive dz unchanged.
        let mut top = Tensor::vector(dz);
        let shift_grad = shift.map(|s| s.dt(dz));
        if let (Some(s), Some(dt)) = (shift, shift_grad) {
            if s.tap == n_layers {
                s.scatter(&mut top, dt);
            }
        }
        act_grads[n_layers] = Some(top);

        for l in (0..n_layers).rev() {
            let g_out = act_grads[l + 1].as_ref().unwrap();
            let (mut g_in, pg) = layer_backward(
                &self.layers[l],
                &trace.activations[l],
                g_out,
                trace.pool_argmax[l].as_deref(),
                with_params,
            )?;
            if let (Some(s), Some(dt)) = (shift, shift_grad) {
                if s.tap == l {
                    s.scatter(&mut g_in, dt);
                }
            }
            act_grads[l] = Some(g_in);
            param_grads[l] = pg;
        }
        Ok(GradientSet {
            names: trace.names.clone(),
            activations: act_grads.into_iter().map(Option::unwrap).collect(),
            params: param_grads,
        })
    }

    /// Class with the largest post-softmax output (first index on ties).
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.predicted_class())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.activations.len() != self.shapes.len() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} activations, network has {}",
                trace.activations.len(),
                self.shapes.len()
            )));
        }
        for (i, (a, s)) in trace.activations.iter().zip(&self.shapes).enumerate() {
            if a.shape() != s.as_slice() || trace.names[i] != self.activation_name(i) {
                return Err(Error::TraceMismatch(format!(
                    "activation `{}` does not match",
                    self.activation_name(i)
                )));
            }
        }
        Ok(())
    }

    /// Smallest distance to a non-differentiable point over all activations
    /// at index `start` and later: the magnitude of every ReLU input, and
    /// the gap between the two largest entries of every pooling window
    /// (all-zero windows fed by a ReLU at or after `start` excepted).
    pub fn kink_margin(&self, trace: &ForwardTrace, start: usize) -> f64 {
        let mut margin = f64::INFINITY;
        for (l, layer) in self.layers.iter().enumerate().skip(start) {
            let input = &trace.activations[l];
            match &layer.kind {
                LayerKind::Relu => {
                    for &v in input.data() {
                        margin = margin.min(v.abs());
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    let after_relu = l > start && matches!(self.layers[l - 1].kind, LayerKind::Relu);
                    let out_shape = &self.shapes[l + 1];
                    for oi in 0..out_shape[0] {
                        for oj in 0..out_shape[1] {
                            for k in 0..out_shape[2] {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for di in 0..window.0 {
                                    for dj in 0..window.1 {
                                        let v = input.get(&[oi * stride + di, oj * stride + dj, k]);
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                // All-zero windows behind a ReLU hold dead units,
                                // which stay at zero under small perturbations.
                                if second.is_finite() && !(after_relu && best == 0.0) {
                                    margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// Gradient of a scalar with respect to one layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Which score an attribution differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// The logit `z_c`.
    Pre,
    /// The probability `y_c = softmax(z)_c`.
    Post,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Pre => "pre",
            ScoreKind::Post => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreSelector {
    pub kind: ScoreKind,
    pub class: usize,
}

impl ScoreSelector {
    pub fn pre(class: usize) -> Self {
        Self {
            kind: ScoreKind::Pre,
            class,
        }
    }

    pub fn post(class: usize) -> Self {
        Self {
            kind: ScoreKind::Post,
            class,
        }
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    names: Vec<String>,
    activations: Vec<Tensor>,
    /// Per layer: for each output element of a max-pool, the flat input
    /// index that won the window.
    pool_argmax: Vec<Option<Vec<usize>>>,
    shift: Option<f64>,
    logits: Tensor,
    probs: Tensor,
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn activation(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }

    pub fn activation_by_name(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.activations[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Pool winners of layer `layer` (0-based layer index).
    pub fn pool_argmax(&self, layer: usize) -> Option<&[usize]> {
        self.pool_argmax.get(layer).and_then(|a| a.as_deref())
    }

    /// Pre-softmax output, including the shift when one was applied.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    /// The value `t` added to every logit, if the trace is from a shifted
    /// network.
    pub fn shift(&self) -> Option<f64> {
        self.shift
    }

    pub fn class_count(&self) -> usize {
        self.logits.len()
    }

    pub fn score(&self, sel: ScoreSelector) -> Result<f64> {
        self.check_class(sel.class)?;
        Ok(match sel.kind {
            ScoreKind::Pre => self.logits.data()[sel.class],
            ScoreKind::Post => self.probs.data()[sel.class],
        })
    }

    pub fn predicted_class(&self) -> usize {
        argmax_first(self.probs.data()).unwrap_or(0)
    }

    /// `-ln y_label`, evaluated as `logsumexp(z) - z_label`.
    pub fn cross_entropy(&self, label: usize) -> Result<f64> {
        self.check_class(label)?;
        Ok(log_sum_exp(self.logits.data()) - self.logits.data()[label])
    }

    /// Gradient of the selected score with respect to the logits.
    pub fn score_gradient(&self, sel: ScoreSelector) -> Result<Vec<f64>> {
        self.check_class(sel.class)?;
        let n = self.class_count();
        Ok(match sel.kind {
            ScoreKind::Pre => (0..n).map(|i| if i == sel.class { 1.0 } else { 0.0 }).collect(),
            ScoreKind::Post => {
                let y = self.probs.data();
                let yc = y[sel.class];
                (0..n)
                    .map(|i| {
                        let delta = if i == sel.class { 1.0 } else { 0.0 };
                        yc * (delta - y[i])
                    })
                    .collect()
            }
        })
    }

    /// Gradient of the cross-entropy loss with respect to the logits.
    pub fn cross_entropy_gradient(&self, label: usize) -> Result<Vec<f64>> {
        self.check_class(label)?;
        Ok(self
            .probs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| if i == label { y - 1.0 } else { y })
            .collect())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.class_count() {
            return Err(Error::ClassOutOfRange {
                class,
                classes: self.class_count(),
            });
        }
        Ok(())
    }
}

/// Per-activation and per-parameter gradients of one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    names: Vec<String>,
    activations: Vec<Tensor>,
    params: Vec<Option<ParamGrad>>,
}

impl GradientSet {
    /// Gradient with respect to activation `index` (0 = input).
    pub fn activation(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }

    pub fn activation_by_name(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.activations[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    /// Per layer; empty entries for parameter-free layers or when parameter
    /// gradients were not requested.
    pub fn params(&self) -> &[Option<ParamGrad>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<ParamGrad>> {
        self.params
    }
}

/// Which logits receive the shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftScope {
    /// `z'_i = z_i + t` for every class: softmax-invariant.
    AllClasses,
    /// Only `z'_c` is shifted. Not softmax-invariant; exists as a negative
    /// control for the verification suite.
    SingleClass(usize),
}

/// Parameter-free node adding `t = gain * sum_k A[row, col, k]` to the
/// logits, where `A` is activation `tap`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitShift {
    pub tap: usize,
    pub row: usize,
    pub col: usize,
    pub gain: f64,
    pub scope: ShiftScope,
}

impl LogitShift {
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.tap >= net.activation_count() {
            return Err(Error::InvalidConfig(format!("tap index {} out of range", self.tap)));
        }
        let name = net.activation_name(self.tap);
        let shape = net.activation_shape(self.tap);
        if shape.len() != 3 {
            return Err(Error::layer(
                name,
                format!("tap layer is not spatial (shape {shape:?})"),
            ));
        }
        if self.row >= shape[0] || self.col >= shape[1] {
            return Err(Error::layer(
                name,
                format!(
                    "tap position ({}, {}) outside spatial extent {}x{}",
                    self.row, self.col, shape[0], shape[1]
                ),
            ));
        }
        if !self.gain.is_finite() {
            return Err(Error::InvalidConfig(format!("gain {} is not finite", self.gain)));
        }
        if let ShiftScope::SingleClass(c) = self.scope {
            if c >= net.class_count() {
                return Err(Error::ClassOutOfRange {
                    class: c,
                    classes: net.class_count(),
                });
            }
        }
        Ok(())
    }

    /// `t` for a given tap activation.
    pub fn value(&self, tap_activation: &Tensor) -> f64 {
        let channels = tap_activation.shape()[2];
        let start = tap_activation.offset(&[self.row, self.col, 0]);
        self.gain * tap_activation.data()[start..start + channels].iter().sum::<f64>()
    }

    /// `dS/dt` given `dS/dz'`.
    fn dt(&self, dz: &[f64]) -> f64 {
        match self.scope {
            ShiftScope::AllClasses => dz.iter().sum(),
            ShiftScope::SingleClass(c) => dz[c],
        }
    }

    /// Accumulate `dS/dt * dt/dA` into a tap-activation gradient.
    fn scatter(&self, grad: &mut Tensor, dt: f64) {
        let channels = grad.shape()[2];
        let start = grad.offset(&[self.row, self.col, 0]);
        for g in &mut grad.data_mut()[start..start + channels] {
            *g += self.gain * dt;
        }
    }
}

fn apply_shift(raw: &[f64], shift: Option<&LogitShift>, acts: &[Tensor]) -> (Vec<f64>, Option<f64>) {
    match shift {
        None => (raw.to_vec(), None),
        Some(s) => {
            let t = s.value(&acts[s.tap]);
            let shifted = raw
                .iter()
                .enumerate()
                .map(|(i, &z)| match s.scope {
                    ShiftScope::AllClasses => z + t,
                    ShiftScope::SingleClass(c) if c == i => z + t,
                    ShiftScope::SingleClass(_) => z,
                })
                .collect();
            (shifted, Some(t))
        }
    }
}

/// `y_c = exp(z_c) / sum_i exp(z_i)`.
///
/// Evaluated as `exp(z_c - max z) / sum_i exp(z_i - max z)`, which is the
/// same shift invariance the logit-shift attack relies on.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".to_string()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let name = &layer.name;
    match &layer.kind {
        LayerKind::Conv2d {
            weights,
            bias,
            stride,
            padding,
        } => {
            let ws = weights.shape();
            if ws.len() != 4 {
                return Err(Error::layer(name, "conv weights must be out x kh x kw x in"));
            }
            if bias.shape() != [ws[0]] {
                return Err(Error::layer(
                    name,
                    format!("bias shape {:?} != [{}]", bias.shape(), ws[0]),
                ));
            }
            if input.len() != 3 || input[2] != ws[3] {
                return Err(Error::layer(
                    name,
                    format!("expects H x W x {} input, got {input:?}", ws[3]),
                ));
            }
            if *stride == 0 {
                return Err(Error::layer(name, "stride must be positive"));
            }
            if *padding >= ws[1] || *padding >= ws[2] {
                return Err(Error::layer(name, "padding must be smaller than the kernel"));
            }
            let (h, w) = (input[0] + 2 * padding, input[1] + 2 * padding);
            if h < ws[1] || w < ws[2] {
                return Err(Error::layer(name, "kernel larger than padded input"));
            }
            Ok(vec![(h - ws[1]) / stride + 1, (w - ws[2]) / stride + 1, ws[0]])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::MaxPool { window, stride } => {
            if input.len() != 3 {
                return Err(Error::layer(name, format!("expects H x W x C input, got {input:?}")));
            }
            if window.0 == 0 || window.1 == 0 || *stride == 0 {
                return Err(Error::layer(name, "window and stride must be positive"));
            }
            if input[0] < window.0 || input[1] < window.1 {
                return Err(Error::layer(name, "window larger than input"));
            }
            Ok(vec![
                (input[0] - window.0) / stride + 1,
                (input[1] - window.1) / stride + 1,
                input[2],
            ])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Dense { weights, bias } => {
            let ws = weights.shape();
            if ws.len() != 2 {
                return Err(Error::layer(name, "dense weights must be out x in"));
            }
            if bias.shape() != [ws[0]] {
                return Err(Error::layer(
                    name,
                    format!("bias shape {:?} != [{}]", bias.shape(), ws[0]),
                ));
            }
            if input.len() != 1 || input[0] != ws[1] {
                return Err(Error::layer(
                    name,
                    format!("expects a vector of length {}, got {input:?}", ws[1]),
                ));
            }
            Ok(vec![ws[0]])
        }
    }
}

fn layer_forward(layer: &LayerSpec, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    let out_shape = output_shape(layer, x.shape())?;
    Ok(match &layer.kind {
        LayerKind::Conv2d {
            weights,
            bias,
            stride,
            padding,
        } => (conv_forward(x, weights, bias, *stride, *padding, &out_shape), None),
        LayerKind::Relu => (x.map(|v| if v > 0.0 { v } else { 0.0 }), None),
        LayerKind::MaxPool { window, stride } => {
            let (out, arg) = pool_forward(x, *window, *stride, &out_shape);
            (out, Some(arg))
        }
        LayerKind::Flatten => (Tensor::from_parts(out_shape, x.data().to_vec()), None),
        LayerKind::Dense { weights, bias } => {
            let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
            let w = weights.data();
            let out = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    bias.data()[o] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            (Tensor::from_parts(out_shape, out), None)
        }
    })
}

/// Visit every (output cell, kernel tap, input cell) triple of a convolution.
/// Padding positions are skipped.
#[inline]
fn conv_taps(
    in_shape: &[usize],
    w_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (h, w, cin) = (in_shape[0] as isize, in_shape[1] as isize, in_shape[2]);
    let (kh, kw) = (w_shape[1], w_shape[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    for oi in 0..oh {
        for oj in 0..ow {
            let out_cell = oi * ow + oj;
            for di in 0..kh {
                let ii = (oi * stride + di) as isize - padding as isize;
                if ii < 0 || ii >= h {
                    continue;
                }
                for dj in 0..kw {
                    let jj = (oj * stride + dj) as isize - padding as isize;
                    if jj < 0 || jj >= w {
                        continue;
                    }
                    let in_cell = (ii as usize * w as usize + jj as usize) * cin;
                    let kernel_tap = (di * kw + dj) * cin;
                    f(out_cell, kernel_tap, in_cell);
                }
            }
        }
    }
}

fn conv_forward(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let ws = weights.shape();
    let (cout, cin) = (ws[0], ws[3]);
    let kernel_len = ws[1] * ws[2] * cin;
    let (xd, wd) = (x.data(), weights.data());
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for _ in 0..out_shape[0] * out_shape[1] {
        out.extend_from_slice(bias.data());
    }
    conv_taps(x.shape(), ws, out_shape, stride, padding, |cell, tap, in_cell| {
        let xs = &xd[in_cell..in_cell + cin];
        for co in 0..cout {
            let wk = &wd[co * kernel_len + tap..co * kernel_len + tap + cin];
            out[cell * cout + co] += wk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn pool_forward(x: &Tensor, window: (usize, usize), stride: usize, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let n = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for oi in 0..out_shape[0] {
        for oj in 0..out_shape[1] {
            for k in 0..out_shape[2] {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                // Row-major scan; strict `>` keeps the first maximum.
                for di in 0..window.0 {
                    for dj in 0..window.1 {
                        let at = x.offset(&[oi * stride + di, oj * stride + dj, k]);
                        let v = x.data()[at];
                        if best_at == usize::MAX || v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (Tensor::from_parts(out_shape.to_vec(), out), arg)
}

fn layer_backward(
    layer: &LayerSpec,
    x: &Tensor,
    g_out: &Tensor,
    pool_argmax: Option<&[usize]>,
    with_params: bool,
) -> Result<(Tensor, Option<ParamGrad>)> {
    Ok(match &layer.kind {
        LayerKind::Conv2d {
            weights,
            stride,
            padding,
            ..
        } => {
            let ws = weights.shape();
            let (cout, cin) = (ws[0], ws[3]);
            let kernel_len = ws[1] * ws[2] * cin;
            let (xd, wd, gd) = (x.data(), weights.data(), g_out.data());
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; if with_params { weights.len() } else { 0 }];
            conv_taps(x.shape(), ws, g_out.shape(), *stride, *padding, |cell, tap, in_cell| {
                let go = &gd[cell * cout..(cell + 1) * cout];
                for (co, &g) in go.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let base = co * kernel_len + tap;
                    for ci in 0..cin {
                        gx[in_cell + ci] += g * wd[base + ci];
                    }
                    if with_params {
                        for ci in 0..cin {
                            gw[base + ci] += g * xd[in_cell + ci];
                        }
                    }
                }
            });
            let pg = with_params.then(|| {
                let mut gb = vec![0.0; cout];
                for cell in gd.chunks(cout) {
                    for (b, &g) in gb.iter_mut().zip(cell) {
                        *b += g;
                    }
                }
                ParamGrad {
                    weights: Tensor::from_parts(ws.to_vec(), gw),
                    bias: Tensor::from_parts(vec![cout], gb),
                }
            });
            (Tensor::from_parts(x.shape().to_vec(), gx), pg)
        }
        LayerKind::Relu => {
            // Subgradient 0 at exactly 0.
            let gx = x
                .data()
                .iter()
                .zip(g_out.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            (Tensor::from_parts(x.shape().to_vec(), gx), None)
        }
        LayerKind::MaxPool { .. } => {
            let arg =
                pool_argmax.ok_or_else(|| Error::TraceMismatch(format!("no pool record for `{}`", layer.name)))?;
            let mut gx = vec![0.0; x.len()];
            for (&at, &g) in arg.iter().zip(g_out.data()) {
                gx[at] += g;
            }
            (Tensor::from_parts(x.shape().to_vec(), gx), None)
        }
        LayerKind::Flatten => (Tensor::from_parts(x.shape().to_vec(), g_out.data().to_vec()), None),
        LayerKind::Dense { weights, .. } => {
            let (n_out, n_in) = (weights.shape()[0], weights.shape()[1]);
            let (wd, gd) = (weights.data(), g_out.data());
            let mut gx = vec![0.0; n_in];
            for (o, &g) in gd.iter().enumerate() {
                for (acc, &w) in gx.iter_mut().zip(&wd[o * n_in..(o + 1) * n_in]) {
                    *acc += g * w;
                }
            }
            let pg = with_params.then(|| {
                let mut gw = Vec::with_capacity(n_out * n_in);
                for &g in gd {
                    gw.extend(x.data().iter().map(|&v| g * v));
                }
                ParamGrad {
                    weights: Tensor::from_parts(vec![n_out, n_in], gw),
                    bias: g_out.clone(),
                }
            });
            (Tensor::from_parts(vec![n_in], gx), pg)
        }
    })
}

/// Anything that evaluates as a network plus an optional logit shift. Both
/// the plain [`Network`] and the attacked network implement it, so
/// attribution and verification code is written once.
pub trait Classifier {
    fn network(&self) -> &Network;

    fn logit_shift(&self) -> Option<&LogitShift> {
        None
    }

    fn forward(&self, input: &Tensor) -> Result<ForwardTrace> {
        self.network().forward_with(input, self.logit_shift())
    }

    fn backward(&self, trace: &ForwardTrace, sel: ScoreSelector) -> Result<GradientSet> {
        self.network().backward_with(trace, sel, self.logit_shift())
    }

    /// Activation gradients only; parameter gradients are left empty.
    fn activation_gradients(&self, trace: &ForwardTrace, sel: ScoreSelector) -> Result<GradientSet> {
        let dz = trace.score_gradient(sel)?;
        self.network()
            .backward_from_logit_grad(trace, &dz, self.logit_shift(), false)
    }

    /// Parameter gradients of the cross-entropy loss for one labeled input.
    fn loss_gradients(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<Option<ParamGrad>>)> {
        let trace = self.forward(input)?;
        let loss = trace.cross_entropy(label)?;
        let dz = trace.cross_entropy_gradient(label)?;
        let grads = self
            .network()
            .backward_from_logit_grad(&trace, &dz, self.logit_shift(), true)?;
        Ok((loss, grads.into_params()))
    }

    fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.predicted_class())
    }

    fn finite_diff_gradient(&self, input: &Tensor, sel: ScoreSelector, target: &str, h: f64) -> Result<Tensor> {
        finite_diff_gradient(self.network(), self.logit_shift(), input, sel, target, h)
    }
}

impl Classifier for Network {
    fn network(&self) -> &Network {
        self
    }
}

/// Central-difference estimate of `dS/dA` for activation `target`, re-running
/// only the downstream layers for each perturbed coordinate.
pub fn finite_diff_gradient(
    net: &Network,
    shift: Option<&LogitShift>,
    input: &Tensor,
    sel: ScoreSelector,
    target: &str,
    h: f64,
) -> Result<Tensor> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(format!("step h = {h} must be positive")));
    }
    let index = net.activation_index(target)?;
    let trace = net.forward_with(input, shift)?;
    trace.check_class(sel.class)?;
    let base = trace.activation(index).clone();
    let score_of = |logits: Vec<f64>| -> Result<f64> {
        Ok(match sel.kind {
            ScoreKind::Pre => logits[sel.class],
            ScoreKind::Post => softmax(&logits)?[sel.class],
        })
    };
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = base.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = score_of(net.logits_from(index, &probe, &trace, shift)?)?;
        probe.data_mut()[i] = orig - h;
        let down = score_of(net.logits_from(index, &probe, &trace, shift)?)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(base.shape().to_vec(), grad))
}

/// `max|a - b| / max(max|a|, max|b|)`, 0 when both are identically zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.max_abs_diff(b)?;
    let scale = a.max_abs().max(b.max_abs());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}
