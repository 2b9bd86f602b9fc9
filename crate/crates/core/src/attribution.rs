//! Gradient-based attribution (saliency, Grad-CAM, integrated gradients) in
//! pre- and post-softmax flavors, plus display helpers and heatmap
//! comparison statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Classifier, ForwardTrace, GradientSet, Network, ScoreKind, ScoreSelector};
use crate::tensor::Tensor;

/// How Grad-CAM turns gradients and activations into a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamVariant {
    /// Channel weights are the spatial mean of the gradient.
    Gap,
    /// Gradient times activation, summed over channels per cell.
    Elementwise,
}

impl CamVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            CamVariant::Gap => "gap",
            CamVariant::Elementwise => "elementwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `max(pre_relu, 0)`, shape `H x W`.
    pub grid: Tensor,
    pub pre_relu: Tensor,
    pub target_layer: String,
    pub class: usize,
    pub score_kind: ScoreKind,
    pub variant: CamVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Saliency,
    IntegratedGradients,
}

/// Input-shaped attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub method: AttributionMethod,
    pub class: usize,
    pub score_kind: ScoreKind,
    /// Integrated-gradients baseline.
    pub baseline: Option<Tensor>,
}

/// Plain gradient `dS/dx`.
pub fn saliency(model: &impl Classifier, input: &Tensor, sel: ScoreSelector) -> Result<AttributionMap> {
    let trace = model.forward(input)?;
    let grads = model.activation_gradients(&trace, sel)?;
    Ok(AttributionMap {
        values: grads.input().clone(),
        method: AttributionMethod::Saliency,
        class: sel.class,
        score_kind: sel.kind,
        baseline: None,
    })
}

pub fn grad_cam(
    model: &impl Classifier,
    input: &Tensor,
    class: usize,
    target_layer: &str,
    score_kind: ScoreKind,
    variant: CamVariant,
) -> Result<Heatmap> {
    let trace = model.forward(input)?;
    let sel = ScoreSelector {
        kind: score_kind,
        class,
    };
    let grads = model.activation_gradients(&trace, sel)?;
    grad_cam_from(model.network(), &trace, &grads, sel, target_layer, variant)
}

/// Grad-CAM from an existing trace and gradient set, so several variants
/// can share one backward pass.
pub fn grad_cam_from(
    net: &Network,
    trace: &ForwardTrace,
    grads: &GradientSet,
    sel: ScoreSelector,
    target_layer: &str,
    variant: CamVariant,
) -> Result<Heatmap> {
    let index = net.activation_index(target_layer)?;
    let acts = trace.activation(index);
    let g = grads.activation(index);
    let shape = acts.shape();
    if shape.len() != 3 {
        return Err(Error::layer(
            target_layer,
            format!("Grad-CAM needs a spatial H x W x C layer, got shape {shape:?}"),
        ));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (a, g) = (acts.data(), g.data());
    let pre: Vec<f64> = match variant {
        CamVariant::Gap => {
            let z = (h * w) as f64;
            let mut alpha = vec![0.0; c];
            for cell in g.chunks(c) {
                for (al, &v) in alpha.iter_mut().zip(cell) {
                    *al += v;
                }
            }
            alpha.iter_mut().for_each(|v| *v /= z);
            a.chunks(c)
                .map(|cell| cell.iter().zip(&alpha).map(|(x, al)| x * al).sum())
                .collect()
        }
        CamVariant::Elementwise => a
            .chunks(c)
            .zip(g.chunks(c))
            .map(|(ac, gc)| ac.iter().zip(gc).map(|(x, y)| x * y).sum())
            .collect(),
    };
    let pre_relu = Tensor::new(vec![h, w], pre)?;
    Ok(Heatmap {
        grid: pre_relu.map(|v| v.max(0.0)),
        pre_relu,
        target_layer: target_layer.to_string(),
        class: sel.class,
        score_kind: sel.kind,
        variant,
    })
}

/// Midpoint-rule integrated gradients along the straight path from
/// `baseline` to `input`.
pub fn integrated_gradients(
    model: &impl Classifier,
    input: &Tensor,
    baseline: &Tensor,
    class: usize,
    steps: usize,
    score_kind: ScoreKind,
) -> Result<AttributionMap> {
    if baseline.shape() != input.shape() {
        return Err(Error::ShapeMismatch {
            left: input.shape().to_vec(),
            right: baseline.shape().to_vec(),
        });
    }
    if steps == 0 {
        return Err(Error::InvalidConfig(
            "integrated gradients needs at least one step".to_string(),
        ));
    }
    let sel = ScoreSelector {
        kind: score_kind,
        class,
    };
    let delta = input.sub(baseline)?;
    let mut total = vec![0.0; input.len()];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = baseline
            .data()
            .iter()
            .zip(delta.data())
            .map(|(b, d)| b + alpha * d)
            .collect();
        let point = Tensor::new(input.shape().to_vec(), point)?;
        let trace = model.forward(&point)?;
        let grads = model.activation_gradients(&trace, sel)?;
        for (acc, g) in total.iter_mut().zip(grads.input().data()) {
            *acc += g;
        }
    }
    let values = total
        .iter()
        .zip(delta.data())
        .map(|(g, d)| d * g / steps as f64)
        .collect();
    Ok(AttributionMap {
        values: Tensor::new(input.shape().to_vec(), values)?,
        method: AttributionMethod::IntegratedGradients,
        class,
        score_kind,
        baseline: Some(baseline.clone()),
    })
}

/// Corner-aligned bilinear resize of an `H x W` grid to `out_h x out_w`.
pub fn upsample(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = grid.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape(format!("upsample expects H x W, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if out_h < h || out_w < w {
        return Err(Error::InvalidConfig(format!(
            "cannot upsample {h}x{w} to smaller {out_h}x{out_w}"
        )));
    }
    // Source coordinate for output index o along an axis of length n.
    let coord = |o: usize, n: usize, out: usize| -> (usize, usize, f64) {
        if n == 1 || out == 1 {
            return (0, 0, 0.0);
        }
        let x = o as f64 * (n - 1) as f64 / (out - 1) as f64;
        let lo = (x.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let d = grid.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oi in 0..out_h {
        let (r0, r1, fr) = coord(oi, h, out_h);
        for oj in 0..out_w {
            let (c0, c1, fc) = coord(oj, w, out_w);
            let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
            let bottom = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: Tensor,
    /// Set when the map has no positive entry and was returned unchanged.
    pub zero_map: bool,
}

/// Divide by the maximum when it is positive.
pub fn normalize(m: &Tensor) -> Normalized {
    let max = m.max();
    if max > 0.0 {
        Normalized {
            map: m.map(|v| v / max),
            zero_map: false,
        }
    } else {
        Normalized {
            map: m.clone(),
            zero_map: true,
        }
    }
}

/// Inclusive-exclusive rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn cell(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            rows: 1,
            cols: 1,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.rows && col >= self.col && col < self.col + self.cols
    }
}

/// Cells of activation `target` that can influence cell `(row, col)` of
/// activation `tap`. Equal to the single cell when `target == tap`; the
/// receptive field when `target` is upstream.
pub fn tap_region(net: &Network, tap: usize, row: usize, col: usize, target: usize) -> Result<Region> {
    if target > tap {
        return Err(Error::InvalidConfig(format!(
            "layer `{}` is downstream of the tap `{}`",
            net.activation_name(target),
            net.activation_name(tap)
        )));
    }
    let (mut r0, mut r1, mut c0, mut c1) = (row as isize, row as isize, col as isize, col as isize);
    for l in (target..tap).rev() {
        let in_shape = net.activation_shape(l);
        if in_shape.len() != 3 {
            return Err(Error::layer(net.activation_name(l), "not a spatial layer"));
        }
        let (reach_h, reach_w, stride, pad) = match &net.layers()[l].kind {
            crate::network::LayerKind::Relu => (1, 1, 1, 0),
            crate::network::LayerKind::MaxPool { window, stride } => (window.0, window.1, *stride, 0),
            crate::network::LayerKind::Conv2d {
                weights,
                stride,
                padding,
                ..
            } => (weights.shape()[1], weights.shape()[2], *stride, *padding),
            _ => return Err(Error::layer(net.activation_name(l + 1), "not a spatial layer")),
        };
        let (s, p) = (stride as isize, pad as isize);
        r0 = (r0 * s - p).max(0);
        c0 = (c0 * s - p).max(0);
        r1 = (r1 * s - p + reach_h as isize - 1).min(in_shape[0] as isize - 1);
        c1 = (c1 * s - p + reach_w as isize - 1).min(in_shape[1] as isize - 1);
    }
    Ok(Region {
        row: r0 as usize,
        col: c0 as usize,
        rows: (r1 - r0 + 1) as usize,
        cols: (c1 - c0 + 1) as usize,
    })
}

/// Side-by-side statistics for two same-shaped maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// `None` when either map is constant.
    pub pearson: Option<f64>,
    /// Pearson correlation of average ranks; `None` when either map is
    /// constant.
    pub spearman: Option<f64>,
    pub max_abs_diff: f64,
    /// Chebyshev distance between the two argmax cells.
    pub argmax_distance: usize,
    pub mass_in_region_a: f64,
    pub mass_in_region_b: f64,
}

impl ComparisonReport {
    pub fn correlation_undefined(&self) -> bool {
        self.pearson.is_none() || self.spearman.is_none()
    }
}

pub fn compare_heatmaps(a: &Tensor, b: &Tensor, region: Region) -> Result<ComparisonReport> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "heatmaps must be H x W, got {:?}",
            a.shape()
        )));
    }
    let pos = |t: &Tensor| -> Result<(usize, usize)> {
        let i = t.argmax_flat()?;
        Ok((i / t.shape()[1], i % t.shape()[1]))
    };
    let (pa, pb) = (pos(a)?, pos(b)?);
    Ok(ComparisonReport {
        pearson: pearson(a.data(), b.data()),
        spearman: spearman(a.data(), b.data()),
        max_abs_diff: a.max_abs_diff(b)?,
        argmax_distance: pa.0.abs_diff(pb.0).max(pa.1.abs_diff(pb.1)),
        mass_in_region_a: mass_fraction(a, region),
        mass_in_region_b: mass_fraction(b, region),
    })
}

/// `sum over region / sum over map`, 0 for a map summing to zero.
pub fn mass_fraction(m: &Tensor, region: Region) -> f64 {
    let w = m.shape()[1];
    let total: f64 = m.data().iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = m
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| region.contains(i / w, i % w))
        .map(|(_, v)| v)
        .sum();
    inside / total
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}
