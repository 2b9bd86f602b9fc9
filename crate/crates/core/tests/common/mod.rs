//! Random small networks and finite-difference oracles shared by the
//! integration tests.
#![allow(dead_code)]

use logitshift::network::{finite_diff_gradient, relative_error, INPUT};
use logitshift::prng::Prng;
use logitshift::trainer::init_network;
use logitshift::{LayerKind, LayerSpec, Network, ScoreKind, ScoreSelector, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
/// Configurations closer than this to a ReLU or max-pool kink are resampled.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerType {
    Conv,
    Relu,
    MaxPool,
    Flatten,
    Dense,
    ToyCnn,
}

pub const LAYER_TYPES: [LayerType; 6] = [
    LayerType::Conv,
    LayerType::Relu,
    LayerType::MaxPool,
    LayerType::Flatten,
    LayerType::Dense,
    LayerType::ToyCnn,
];

pub fn random_tensor(rng: &mut Prng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn uniform_tensor(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn range(rng: &mut Prng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn dense(rng: &mut Prng, name: &str, inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Dense {
            weights: random_tensor(rng, &[outputs, inputs], (1.0 / inputs as f64).sqrt()),
            bias: random_tensor(rng, &[outputs], 0.1),
        },
    )
}

fn head(rng: &mut Prng, net_shape: &[usize], classes: usize) -> Vec<LayerSpec> {
    let n = net_shape.iter().product();
    vec![
        LayerSpec::new("flatten", LayerKind::Flatten),
        dense(rng, "head", n, classes),
    ]
}

/// Output shape of a conv or pool over an `h x w` input.
fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// A network whose first layer is of the requested type, an input for it
/// and a score to differentiate.
pub struct Case {
    pub net: Network,
    pub input: Tensor,
    pub sel: ScoreSelector,
    /// Names of layers whose parameters are checked.
    pub param_layers: Vec<String>,
}

fn draw_case(kind: LayerType, rng: &mut Prng) -> Case {
    let classes = range(rng, 2, 4);
    let (h, w, c) = (range(rng, 3, 7), range(rng, 3, 7), range(rng, 1, 3));
    let spatial = vec![h, w, c];
    let (input_shape, layers, params): (Vec<usize>, Vec<LayerSpec>, Vec<String>) = match kind {
        LayerType::Conv => {
            let (kh, kw) = (range(rng, 1, 3.min(h)), range(rng, 1, 3.min(w)));
            let padding = range(rng, 0, kh.min(kw) - 1);
            let stride = range(rng, 1, 2);
            let out_c = range(rng, 1, 3);
            let fan_in = (kh * kw * c) as f64;
            let conv = LayerSpec::new(
                "conv",
                LayerKind::Conv2d {
                    weights: random_tensor(rng, &[out_c, kh, kw, c], (1.0 / fan_in).sqrt()),
                    bias: random_tensor(rng, &[out_c], 0.1),
                    stride,
                    padding,
                },
            );
            let shape = [out_len(h, kh, stride, padding), out_len(w, kw, stride, padding), out_c];
            let mut layers = vec![conv];
            layers.extend(head(rng, &shape, classes));
            (spatial, layers, vec!["conv".into(), "head".into()])
        }
        LayerType::Relu => {
            let mut layers = vec![LayerSpec::new("relu", LayerKind::Relu)];
            layers.extend(head(rng, &spatial, classes));
            (spatial.clone(), layers, vec!["head".into()])
        }
        LayerType::MaxPool => {
            let window = (range(rng, 1, 3.min(h)), range(rng, 1, 3.min(w)));
            let stride = range(rng, 1, 3);
            let pool = LayerSpec::new("pool", LayerKind::MaxPool { window, stride });
            let shape = [out_len(h, window.0, stride, 0), out_len(w, window.1, stride, 0), c];
            let mut layers = vec![pool];
            layers.extend(head(rng, &shape, classes));
            (spatial.clone(), layers, vec!["head".into()])
        }
        LayerType::Flatten => (spatial.clone(), head(rng, &spatial, classes), vec!["head".into()]),
        LayerType::Dense => {
            let (n, hidden) = (range(rng, 1, 12), range(rng, 1, 8));
            let layers = vec![
                dense(rng, "hidden", n, hidden),
                LayerSpec::new("relu", LayerKind::Relu),
                dense(rng, "head", hidden, classes),
            ];
            (vec![n], layers, vec!["hidden".into(), "head".into()])
        }
        LayerType::ToyCnn => {
            let net = init_network(8, rng.next_u64()).unwrap();
            let layers = net.layers().to_vec();
            let names = layers
                .iter()
                .filter(|l| l.kind.has_params())
                .map(|l| l.name.clone())
                .collect();
            (vec![8, 8, 1], layers, names)
        }
    };
    let net = Network::new(input_shape.clone(), layers).unwrap();
    let class = rng.below(net.class_count());
    let sel = if rng.below(2) == 0 {
        ScoreSelector::pre(class)
    } else {
        ScoreSelector::post(class)
    };
    let input = match kind {
        LayerType::ToyCnn => uniform_tensor(rng, &input_shape, 0.0, 1.0),
        _ => uniform_tensor(rng, &input_shape, -1.0, 1.0),
    };
    Case {
        net,
        input,
        sel,
        param_layers: params,
    }
}

/// Draw until the configuration is at least [`MIN_KINK_MARGIN`] away from
/// every non-differentiable point.
pub fn random_case(kind: LayerType, rng: &mut Prng) -> Case {
    loop {
        let case = draw_case(kind, rng);
        let trace = case.net.forward(&case.input).unwrap();
        if case.net.kink_margin(&trace, 0) >= MIN_KINK_MARGIN {
            return case;
        }
    }
}

fn score(net: &Network, x: &Tensor, sel: ScoreSelector) -> f64 {
    net.forward(x).unwrap().score(sel).unwrap()
}

/// Central differences of the score with respect to one layer's weights
/// and bias, rebuilding the network for each perturbed coordinate.
pub fn param_fd(net: &Network, layer: &str, x: &Tensor, sel: ScoreSelector, h: f64) -> (Tensor, Tensor) {
    let index = net.layers().iter().position(|l| l.name == layer).unwrap();
    let perturbed = |which: usize, i: usize, delta: f64| -> f64 {
        let mut layers = net.layers().to_vec();
        let (w, b) = match &mut layers[index].kind {
            LayerKind::Conv2d { weights, bias, .. } | LayerKind::Dense { weights, bias } => (weights, bias),
            _ => panic!("layer {layer} has no parameters"),
        };
        let t = if which == 0 { w } else { b };
        let mut data = t.data().to_vec();
        data[i] += delta;
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
        score(&Network::new(net.input_shape().to_vec(), layers).unwrap(), x, sel)
    };
    let (w, b) = net.params()[index].unwrap();
    let grad = |which: usize, t: &Tensor| {
        let g = (0..t.len())
            .map(|i| (perturbed(which, i, h) - perturbed(which, i, -h)) / (2.0 * h))
            .collect();
        Tensor::new(t.shape().to_vec(), g).unwrap()
    };
    (grad(0, w), grad(1, b))
}

/// Worst relative error of `backward` against central differences over the
/// input gradient and every checked parameter tensor.
pub fn case_error(case: &Case) -> f64 {
    let net = &case.net;
    let trace = net.forward(&case.input).unwrap();
    let grads = net.backward(&trace, case.sel).unwrap();
    let fd = finite_diff_gradient(net, None, &case.input, case.sel, INPUT, FD_STEP).unwrap();
    let mut worst = relative_error(grads.input(), &fd).unwrap();
    for name in &case.param_layers {
        let index = net.layers().iter().position(|l| &l.name == name).unwrap();
        let p = grads.params()[index].as_ref().expect("parameter gradient");
        let (fw, fb) = param_fd(net, name, &case.input, case.sel, FD_STEP);
        worst = worst.max(relative_error(&p.weights, &fw).unwrap());
        worst = worst.max(relative_error(&p.bias, &fb).unwrap());
    }
    worst
}

pub fn score_kinds() -> [ScoreKind; 2] {
    [ScoreKind::Pre, ScoreKind::Post]
}
