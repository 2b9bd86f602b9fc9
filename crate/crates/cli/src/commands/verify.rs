use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use logitshift::attribution::{compare_heatmaps, grad_cam_from, integrated_gradients, tap_region, CamVariant, Region};
use logitshift::formats::dataset::parse_dataset;
use logitshift::network::ShiftScope;
use logitshift::prng::Prng;
use logitshift::surgery::{
    verify_output_equivalence, verify_postsoftmax_gradient_equality, verify_training_gradient_equality, AttackConfig,
    EquivalenceReport, OUTPUT_TOLERANCE, PARAM_GRADIENT_TOLERANCE,
};
use logitshift::{Classifier, Model, Network, ScoreKind, ScoreSelector, Tensor};

use crate::io;
use crate::report::{
    failed_names, to_json, AttackEcho, AttributionInvariance, ComparisonEntry, Criterion, ExperimentReport,
    MethodDeviation, ProbeEcho, Tolerances, VerifyConfig, REPORT_FORMAT, REPORT_VERSION, TOOL_VERSION,
};
use crate::Status;

/// Elementwise bound on post-softmax attribution maps.
pub const ATTRIBUTION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["probes", "random"]))]
pub struct VerifyArgs {
    /// Original model.
    #[arg(long)]
    pub model: PathBuf,
    /// Model to compare against the original, usually the attacked one.
    #[arg(long)]
    pub attacked: PathBuf,
    /// Directory written by `dataset`.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Number of uniform random probe images.
    #[arg(long, value_name = "N")]
    pub random: Option<usize>,
    /// Seed for `--random`.
    #[arg(long, default_value_t = 0, requires = "random")]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
    /// Probes used for the attribution suite.
    #[arg(long, default_value_t = 20)]
    pub attribution_probes: usize,
    /// Integrated-gradients steps in the attribution suite.
    #[arg(long, default_value_t = 32)]
    pub ig_steps: usize,
    /// Grad-CAM layer [default: the tap layer, or the last max-pool]
    #[arg(long)]
    pub layer: Option<String>,
}

/// Labeled probe inputs plus a description for the report.
pub struct Probes {
    pub items: Vec<(Tensor, usize)>,
    pub echo: ProbeEcho,
}

/// `count` images with uniform pixels in `[0, 1)`, labeled round-robin.
pub fn random_probes(shape: &[usize], classes: usize, count: usize, seed: u64) -> Probes {
    let n: usize = shape.iter().product();
    let items = (0..count)
        .map(|i| {
            let mut rng = Prng::substream(seed, i as u64);
            let data = (0..n).map(|_| rng.next_f64()).collect();
            (Tensor::new(shape.to_vec(), data).expect("shape matches"), i % classes)
        })
        .collect();
    Probes {
        items,
        echo: ProbeEcho::Random { count, seed },
    }
}

pub fn dataset_probes(dir: &Path, shape: &[usize]) -> Result<Probes> {
    let manifest_path = dir.join("manifest.json");
    let manifest =
        parse_dataset(&io::read(&manifest_path)?).with_context(|| format!("reading {}", manifest_path.display()))?;
    let items = manifest
        .images
        .iter()
        .map(|e| Ok((io::load_image(&dir.join(&e.file), shape)?, e.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Probes {
        echo: ProbeEcho::Dataset {
            dir: dir.display().to_string(),
            count: items.len(),
            seed: manifest.seed,
        },
        items,
    })
}

#[derive(Debug, Clone)]
pub struct VerifySettings {
    pub attribution_probes: usize,
    pub ig_steps: usize,
    pub batch_size: usize,
    pub layer: Option<String>,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            attribution_probes: 20,
            ig_steps: 32,
            batch_size: 10,
            layer: None,
        }
    }
}

fn same_architecture(a: &Network, b: &Network) -> bool {
    a.input_shape() == b.input_shape()
        && a.layers().len() == b.layers().len()
        && a.layers()
            .iter()
            .zip(b.layers())
            .all(|(x, y)| x.name == y.name && x.kind.type_name() == y.kind.type_name())
        && (0..a.activation_count()).all(|i| a.activation_shape(i) == b.activation_shape(i))
}

/// `sum_c |t[h, w, c]|` as an `H x W` map.
pub fn channel_abs_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.map(f64::abs).reduce_sum(&[2])?)
}

fn attack_echo(m: &Model) -> Option<AttackEcho> {
    m.attack().map(|(cfg, scope)| AttackEcho {
        tap_layer: cfg.tap_layer.clone(),
        i0: cfg.row,
        j0: cfg.col,
        k: cfg.gain,
        shifted_class: match scope {
            ShiftScope::AllClasses => None,
            ShiftScope::SingleClass(c) => Some(c),
        },
    })
}

const EMPTY_REGION: Region = Region {
    row: 0,
    col: 0,
    rows: 0,
    cols: 0,
};

struct Suite {
    invariance: AttributionInvariance,
    comparisons: Vec<ComparisonEntry>,
}

fn attribution_suite(
    orig: &Model,
    atk: &Model,
    probes: &[(Tensor, usize)],
    layer: &str,
    tap: Option<&AttackConfig>,
    s: &VerifySettings,
) -> Result<Suite> {
    let net = orig.base();
    let layer_index = net.activation_index(layer)?;
    let region_at = |target: usize| -> Region {
        tap.and_then(|cfg| {
            let t = net.activation_index(&cfg.tap_layer).ok()?;
            tap_region(net, t, cfg.row, cfg.col, target).ok()
        })
        .unwrap_or(EMPTY_REGION)
    };
    let (cam_region, input_region) = (region_at(layer_index), region_at(0));
    let variants = [CamVariant::Gap, CamVariant::Elementwise];
    // gap, elementwise, saliency, integrated gradients
    let mut dev = [0.0f64; 4];
    let mut comparisons = Vec::new();
    let count = s.attribution_probes.min(probes.len());
    for (p, (x, _)) in probes.iter().take(count).enumerate() {
        let (ta, tb) = (orig.forward(x)?, atk.forward(x)?);
        let class = ta.predicted_class();
        for kind in [ScoreKind::Pre, ScoreKind::Post] {
            let sel = ScoreSelector { kind, class };
            let (ga, gb) = (
                orig.activation_gradients(&ta, sel)?,
                atk.activation_gradients(&tb, sel)?,
            );
            let entry = |method: &str, variant: Option<CamVariant>, region: Region, a: &Tensor, b: &Tensor| {
                Ok::<_, anyhow::Error>(ComparisonEntry {
                    probe: p,
                    class,
                    method: method.to_string(),
                    variant: variant.map(|v| v.as_str().to_string()),
                    score: kind.as_str().to_string(),
                    region,
                    metrics: compare_heatmaps(a, b, region)?,
                })
            };
            let mut found = Vec::new();
            for (slot, &variant) in variants.iter().enumerate() {
                let ha = grad_cam_from(orig.network(), &ta, &ga, sel, layer, variant)?;
                let hb = grad_cam_from(atk.network(), &tb, &gb, sel, layer, variant)?;
                if kind == ScoreKind::Post {
                    dev[slot] = dev[slot].max(ha.pre_relu.max_abs_diff(&hb.pre_relu)?);
                }
                found.push(entry("gradcam", Some(variant), cam_region, &ha.grid, &hb.grid)?);
            }
            if kind == ScoreKind::Post {
                dev[2] = dev[2].max(ga.input().max_abs_diff(gb.input())?);
            }
            let (sa, sb) = (channel_abs_sum(ga.input())?, channel_abs_sum(gb.input())?);
            found.push(entry("saliency", None, input_region, &sa, &sb)?);
            let baseline = Tensor::zeros(x.shape());
            let ia = integrated_gradients(orig, x, &baseline, class, s.ig_steps, kind)?;
            let ib = integrated_gradients(atk, x, &baseline, class, s.ig_steps, kind)?;
            if kind == ScoreKind::Post {
                dev[3] = dev[3].max(ia.values.max_abs_diff(&ib.values)?);
            }
            let (ma, mb) = (channel_abs_sum(&ia.values)?, channel_abs_sum(&ib.values)?);
            found.push(entry("integrated_gradients", None, input_region, &ma, &mb)?);
            comparisons.extend(found);
        }
    }
    let names = [
        ("gradcam", Some("gap")),
        ("gradcam", Some("elementwise")),
        ("saliency", None),
        ("integrated_gradients", None),
    ];
    let methods = names
        .iter()
        .zip(dev)
        .map(|(&(method, variant), max_deviation)| MethodDeviation {
            method: method.to_string(),
            variant: variant.map(str::to_string),
            max_deviation,
        })
        .collect();
    Ok(Suite {
        invariance: AttributionInvariance {
            probe_count: count,
            tolerance: ATTRIBUTION_TOLERANCE,
            max_deviation: dev.iter().copied().fold(0.0, f64::max),
            methods,
        },
        comparisons,
    })
}

/// Run every equivalence check and the attribution suite.
pub fn run_verification(
    orig: &Model,
    atk: &Model,
    names: (&str, &str),
    probes: &Probes,
    s: &VerifySettings,
) -> Result<ExperimentReport> {
    let net = orig.base();
    if !same_architecture(net, atk.base()) {
        bail!("`{}` and `{}` have different architectures", names.0, names.1);
    }
    if probes.items.is_empty() {
        bail!("no probe images");
    }
    if s.batch_size == 0 {
        bail!("batch size must be at least 1");
    }
    let classes = net.class_count();
    if let Some((_, label)) = probes.items.iter().find(|(_, l)| *l >= classes) {
        bail!("probe label {label} is out of range for {classes} classes");
    }
    let tap = match atk.attack() {
        Some((cfg, _)) => Some(cfg.clone()),
        None => AttackConfig::default_for(net).ok(),
    };
    let layer = match (&s.layer, &tap) {
        (Some(l), _) => l.clone(),
        (None, Some(cfg)) => cfg.tap_layer.clone(),
        (None, None) => bail!("no max-pool layer to use for Grad-CAM; pass --layer"),
    };

    let inputs: Vec<Tensor> = probes.items.iter().map(|(x, _)| x.clone()).collect();
    let batches: Vec<Vec<(Tensor, usize)>> = probes.items.chunks(s.batch_size).map(<[_]>::to_vec).collect();
    let equivalence = EquivalenceReport {
        output: verify_output_equivalence(orig, atk, &inputs, OUTPUT_TOLERANCE)?,
        postsoftmax_gradients: verify_postsoftmax_gradient_equality(orig, atk, &inputs, OUTPUT_TOLERANCE)?,
        parameter_gradients: verify_training_gradient_equality(orig, atk, &batches, PARAM_GRADIENT_TOLERANCE)?,
    };
    let suite = attribution_suite(orig, atk, &probes.items, &layer, tap.as_ref(), s)?;

    let criteria = vec![
        Criterion::at_most(
            "output_equivalence",
            equivalence.output.max_output_deviation,
            OUTPUT_TOLERANCE,
        ),
        Criterion::at_least("prediction_agreement", equivalence.output.prediction_agreement, 1.0),
        Criterion::at_most(
            "postsoftmax_gradient_equality",
            equivalence.postsoftmax_gradients.max_deviation,
            OUTPUT_TOLERANCE,
        ),
        Criterion::at_most(
            "training_gradient_equality",
            equivalence.parameter_gradients.max_deviation,
            PARAM_GRADIENT_TOLERANCE,
        ),
        Criterion::at_most(
            "attribution_invariance",
            suite.invariance.max_deviation,
            ATTRIBUTION_TOLERANCE,
        ),
    ];
    Ok(ExperimentReport {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: VerifyConfig {
            model: names.0.to_string(),
            attacked: names.1.to_string(),
            probes: probes.echo.clone(),
            attack: attack_echo(atk),
            gradcam_layer: layer,
            attribution_probes: suite.invariance.probe_count,
            ig_steps: s.ig_steps,
            batch_size: s.batch_size,
            tolerances: Tolerances {
                output: OUTPUT_TOLERANCE,
                postsoftmax_gradient: OUTPUT_TOLERANCE,
                parameter_gradient: PARAM_GRADIENT_TOLERANCE,
                attribution: ATTRIBUTION_TOLERANCE,
            },
        },
        equivalence,
        attribution: suite.invariance,
        comparisons: suite.comparisons,
        passed: criteria.iter().all(|c| c.passed),
        criteria,
    })
}

pub fn run(args: &VerifyArgs) -> Result<Status> {
    let orig = io::load_model(&args.model)?;
    let atk = io::load_model(&args.attacked)?;
    let shape = orig.base().input_shape().to_vec();
    let probes = match (&args.probes, args.random) {
        (Some(dir), _) => dataset_probes(dir, &shape)?,
        (None, Some(n)) => random_probes(&shape, orig.base().class_count(), n, args.seed),
        (None, None) => bail!("pass --probes DIR or --random N"),
    };
    let settings = VerifySettings {
        attribution_probes: args.attribution_probes,
        ig_steps: args.ig_steps,
        layer: args.layer.clone(),
        ..VerifySettings::default()
    };
    let model_name = args.model.display().to_string();
    let attacked_name = args.attacked.display().to_string();
    let report = run_verification(&orig, &atk, (&model_name, &attacked_name), &probes, &settings)?;
    io::write_atomic(&args.report, to_json(&report).as_bytes())?;
    for c in &report.criteria {
        crate::say(format_args!(
            "{} {}: {:e} (bound {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        ));
    }
    Ok(verdict(&report.criteria))
}

pub fn verdict(criteria: &[Criterion]) -> Status {
    let failed = failed_names(criteria);
    if failed.is_empty() {
        Status::Passed
    } else {
        Status::Failed(failed)
    }
}
