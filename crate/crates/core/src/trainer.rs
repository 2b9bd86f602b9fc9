//! Synthetic quadrant-blob data, the reference CNN, plain SGD, and the
//! lockstep experiment that trains an original and an attacked network side
//! by side.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Classifier, LayerKind, LayerSpec, Network, ParamGrad, ShiftScope};
use crate::prng::Prng;
use crate::surgery::{max_param_grad_diff, with_scope, AttackConfig, AttackedNetwork};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 4;
/// Uniform background noise upper bound.
pub const NOISE_LEVEL: f64 = 0.1;

/// Square grayscale images (`S x S x 1`, values in `[0, 1]`), each holding a
/// Gaussian blob inside the quadrant given by its label: 0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Blob centers as `(row, col)` in pixel coordinates.
    pub centers: Vec<(f64, f64)>,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sigma(&self) -> f64 {
        blob_sigma(self.image_size)
    }

    /// The blob without noise or clamping.
    pub fn blob_component(&self, index: usize) -> Tensor {
        blob(self.image_size, self.centers[index], None)
    }
}

pub fn blob_sigma(size: usize) -> f64 {
    size as f64 / 10.0
}

/// Quadrant `(row, col)` half-indices for a label.
pub fn quadrant_of(label: usize) -> (usize, usize) {
    (label / 2, label % 2)
}

/// Label of the quadrant holding pixel `(row, col)` of an `size`-wide grid.
pub fn quadrant_label(row: usize, col: usize, size_h: usize, size_w: usize) -> usize {
    let top = usize::from(row >= size_h / 2);
    let left = usize::from(col >= size_w / 2);
    top * 2 + left
}

fn blob(size: usize, center: (f64, f64), noise: Option<&mut Prng>) -> Tensor {
    let sigma = blob_sigma(size);
    let mut data = Vec::with_capacity(size * size);
    let mut noise = noise;
    for i in 0..size {
        for j in 0..size {
            let (dr, dc) = (i as f64 - center.0, j as f64 - center.1);
            let bump = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            let v = match noise.as_deref_mut() {
                Some(rng) => (bump + rng.uniform(0.0, NOISE_LEVEL)).min(1.0),
                None => bump,
            };
            data.push(v);
        }
    }
    Tensor::from_parts(vec![size, size, 1], data)
}

/// Labels cycle `0, 1, 2, 3, ...`; image `n` draws from its own substream so
/// generation order does not matter.
pub fn gen_blob_dataset(count: usize, image_size: usize, seed: u64) -> Result<SyntheticDataset> {
    if count < CLASS_COUNT {
        return Err(Error::InvalidConfig(format!(
            "need at least {CLASS_COUNT} images, got {count}"
        )));
    }
    if image_size < 8 {
        return Err(Error::InvalidConfig(format!("image size {image_size} < 8")));
    }
    let half = image_size as f64 / 2.0;
    let sigma = blob_sigma(image_size);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for n in 0..count {
        let label = n % CLASS_COUNT;
        let (qr, qc) = quadrant_of(label);
        let mut rng = Prng::substream(seed, n as u64);
        // Center at least one sigma from the quadrant edges.
        let row = qr as f64 * half + rng.uniform(sigma, half - sigma);
        let col = qc as f64 * half + rng.uniform(sigma, half - sigma);
        images.push(blob(image_size, (row, col), Some(&mut rng)));
        labels.push(label);
        centers.push((row, col));
    }
    Ok(SyntheticDataset {
        images,
        labels,
        centers,
        image_size,
        seed,
    })
}

/// Conv(8, 3x3, pad 1) - ReLU - MaxPool 2x2 - Conv(16, 3x3, pad 1) - ReLU -
/// MaxPool 2x2 - Flatten - Dense(4), He-initialized with zero biases.
pub fn init_network(image_size: usize, seed: u64) -> Result<Network> {
    if image_size < 4 {
        return Err(Error::InvalidConfig(format!("image size {image_size} < 4")));
    }
    let pooled = (image_size / 2) / 2;
    let conv = |rng: &mut Prng, out: usize, inp: usize| LayerKind::Conv2d {
        weights: he_tensor(rng, &[out, 3, 3, inp], 9 * inp),
        bias: Tensor::zeros(&[out]),
        stride: 1,
        padding: 1,
    };
    let pool = || LayerKind::MaxPool {
        window: (2, 2),
        stride: 2,
    };
    let flat = pooled * pooled * 16;
    Network::new(
        vec![image_size, image_size, 1],
        vec![
            LayerSpec::new("conv1", conv(&mut Prng::substream(seed, 0), 8, 1)),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", pool()),
            LayerSpec::new("conv2", conv(&mut Prng::substream(seed, 1), 16, 8)),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool2", pool()),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new(
                "dense",
                LayerKind::Dense {
                    weights: he_tensor(&mut Prng::substream(seed, 2), &[CLASS_COUNT, flat], flat),
                    bias: Tensor::zeros(&[CLASS_COUNT]),
                },
            ),
        ],
    )
}

/// Normal entries with variance `2 / fan_in`, drawn in row-major order.
fn he_tensor(rng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the mean loss over the dataset before any update; entry
    /// `e` (1-based) is the mean batch loss seen during epoch `e`.
    pub loss_curve: Vec<f64>,
    pub final_accuracy: f64,
    pub steps: usize,
}

/// Something whose parameters SGD can update.
pub trait Trainable: Classifier {
    fn network_mut(&mut self) -> &mut Network;
}

impl Trainable for Network {
    fn network_mut(&mut self) -> &mut Network {
        self
    }
}

impl Trainable for AttackedNetwork {
    fn network_mut(&mut self) -> &mut Network {
        self.base_mut()
    }
}

/// Batches for `epoch`: a seeded permutation of `0..n` cut into chunks.
pub fn batch_schedule(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Prng::substream(seed, epoch as u64).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean loss and mean parameter gradients over a batch.
pub fn batch_loss_gradients(
    model: &(impl Classifier + ?Sized),
    batch: &[(&Tensor, usize)],
) -> Result<(f64, Vec<Option<ParamGrad>>)> {
    let mut total: Option<Vec<Option<ParamGrad>>> = None;
    let mut loss = 0.0;
    for &(x, label) in batch {
        let (l, grads) = model.loss_gradients(x, label)?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let (Some(a), Some(g)) = (a.as_mut(), g) {
                        a.weights = a.weights.add(&g.weights)?;
                        a.bias = a.bias.add(&g.bias)?;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let grads = total
        .ok_or_else(|| Error::InvalidConfig("empty batch".to_string()))?
        .into_iter()
        .map(|g| {
            g.map(|g| ParamGrad {
                weights: g.weights.scale(1.0 / n),
                bias: g.bias.scale(1.0 / n),
            })
        })
        .collect();
    Ok((loss / n, grads))
}

pub fn mean_loss(model: &impl Classifier, data: &SyntheticDataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        total += model.forward(x)?.cross_entropy(y)?;
    }
    Ok(total / data.len() as f64)
}

pub fn accuracy(model: &impl Classifier, data: &SyntheticDataset) -> Result<f64> {
    let mut hits = 0;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        if model.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn check_data(model: &impl Classifier, data: &SyntheticDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".to_string()));
    }
    if model.network().class_count() != CLASS_COUNT {
        return Err(Error::InvalidConfig(format!(
            "network has {} classes, dataset has {CLASS_COUNT}",
            model.network().class_count()
        )));
    }
    Ok(())
}

/// Non-finite logits mid-training mean the run blew up.
fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Plain minibatch SGD on cross-entropy, in place.
pub fn train_sgd(model: &mut impl Trainable, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut curve = vec![mean_loss(model, data)?];
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = batch_schedule(data.len(), cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            let items: Vec<(&Tensor, usize)> = batch.iter().map(|&i| (&data.images[i], data.labels[i])).collect();
            let (loss, grads) = batch_loss_gradients(model, &items).map_err(|e| diverged(e, epoch, steps))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            model.network_mut().sgd_step(&grads, cfg.learning_rate)?;
            epoch_loss += loss * items.len() as f64;
            steps += 1;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_accuracy: accuracy(model, data)?,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockstepReport {
    /// Max elementwise parameter difference seen after any step.
    pub max_divergence: f64,
    /// Parameter difference after each completed epoch.
    pub epoch_divergence: Vec<f64>,
    /// Max difference between the two batch gradients at any step.
    pub max_step_gradient_deviation: f64,
    pub steps: usize,
}

/// Initialize two identical networks from `init_seed`, attack one, and run
/// the same SGD schedule on both, comparing after every step. Stops after
/// `max_steps` updates when given.
pub fn lockstep_training_check(
    image_size: usize,
    init_seed: u64,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    scope: ShiftScope,
    max_steps: Option<usize>,
) -> Result<LockstepReport> {
    cfg.validate()?;
    let mut orig = init_network(image_size, init_seed)?;
    let mut atk = with_scope(Arc::new(init_network(image_size, init_seed)?), attack, scope)?;
    check_data(&orig, data)?;
    let limit = max_steps.unwrap_or(usize::MAX);
    let mut report = LockstepReport {
        max_divergence: 0.0,
        epoch_divergence: Vec::new(),
        max_step_gradient_deviation: 0.0,
        steps: 0,
    };
    'epochs: for epoch in 0..cfg.epochs {
        for batch in batch_schedule(data.len(), cfg.batch_size, cfg.seed, epoch) {
            if report.steps >= limit {
                break 'epochs;
            }
            let items: Vec<(&Tensor, usize)> = batch.iter().map(|&i| (&data.images[i], data.labels[i])).collect();
            let (la, ga) = batch_loss_gradients(&orig, &items).map_err(|e| diverged(e, epoch, report.steps))?;
            let (lb, gb) = batch_loss_gradients(&atk, &items).map_err(|e| diverged(e, epoch, report.steps))?;
            for loss in [la, lb] {
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: report.steps,
                        loss,
                    });
                }
            }
            report.max_step_gradient_deviation = report.max_step_gradient_deviation.max(max_param_grad_diff(&ga, &gb)?);
            orig.sgd_step(&ga, cfg.learning_rate)?;
            atk.network_mut().sgd_step(&gb, cfg.learning_rate)?;
            report.steps += 1;
            report.max_divergence = report.max_divergence.max(orig.max_param_diff(atk.base())?);
        }
        report.epoch_divergence.push(orig.max_param_diff(atk.base())?);
    }
    Ok(report)
}
