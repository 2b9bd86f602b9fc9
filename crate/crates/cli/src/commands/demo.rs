use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use clap::Args;
use logitshift::attribution::{compare_heatmaps, grad_cam_from, CamVariant, Region};
use logitshift::formats::grid::{write_grid, GridFile};
use logitshift::surgery::{apply_logit_shift, AttackConfig};
use logitshift::trainer::{gen_blob_dataset, quadrant_label, TrainConfig};
use logitshift::{Classifier, Model, ScoreKind, ScoreSelector, Tensor};
use serde::Serialize;

use crate::commands::train::train_reference;
use crate::commands::verify::{run_verification, verdict, Probes, VerifySettings};
use crate::io;
use crate::render::{overlay, panel, ppm_bytes, prepare};
use crate::report::{to_json, AttackEcho, Criterion, ProbeEcho, DEMO_FORMAT, REPORT_VERSION, TOOL_VERSION};
use crate::Status;

pub const TRAIN_ACCURACY_THRESHOLD: f64 = 0.95;
pub const CORNER_HIT_THRESHOLD: f64 = 0.95;
pub const QUADRANT_THRESHOLD: f64 = 0.80;
/// A pre-softmax pair counts as divergent below this rank correlation.
pub const SPEARMAN_THRESHOLD: f64 = 0.5;
pub const PRE_DIVERGENCE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 100)]
    pub test_count: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoConfig {
    pub seed: u64,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub test_seed: u64,
    pub train: TrainConfig,
    pub attack: AttackEcho,
    pub gradcam_layer: String,
    pub spearman_threshold: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    /// Panels whose post-softmax cells render to identical bytes.
    pub post_identical: usize,
    /// Panels whose pre-softmax maps have Spearman below the threshold, or
    /// differ while one of them is constant.
    pub pre_divergent: usize,
    pub pre_spearman_median: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config: DemoConfig,
    pub train_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub images: usize,
    /// Attacked elementwise pre-softmax maps peaking at the tap cell.
    pub corner_hits: usize,
    /// Original elementwise post-softmax maps peaking in the labeled quadrant.
    pub quadrant_hits: usize,
    pub variants: Vec<VariantSummary>,
    pub criteria: Vec<Criterion>,
    pub passed: bool,
}

fn peak(grid: &Tensor) -> Option<(usize, usize)> {
    if grid.max() <= 0.0 {
        return None;
    }
    let i = grid.argmax_flat().ok()?;
    Some((i / grid.shape()[1], i % grid.shape()[1]))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn run(args: &DemoArgs) -> Result<Status> {
    let dir = &args.out_dir;
    io::create_dir(&dir.join("panels"))?;
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: args.epochs,
        batch_size: 10,
        seed: args.seed,
    };
    let (net, metrics) = train_reference(args.seed, args.size, args.count, &cfg)?;
    let net = Arc::new(net);
    let orig = Model::Plain(net.clone());
    let attack = AttackConfig::default_for(&net)?;
    let atk = Model::Attacked(apply_logit_shift(net.clone(), &attack)?);
    io::save_model(&dir.join("model.json"), &orig)?;
    io::save_model(&dir.join("attacked.json"), &atk)?;
    io::write_atomic(&dir.join("train_metrics.json"), to_json(&metrics).as_bytes())?;

    let test_seed = args.seed.wrapping_add(1);
    let test = gen_blob_dataset(args.test_count, args.size, test_seed)?;
    let probes = Probes {
        items: test.images.iter().cloned().zip(test.labels.iter().copied()).collect(),
        echo: ProbeEcho::Generated {
            count: test.len(),
            seed: test_seed,
        },
    };
    let report = run_verification(
        &orig,
        &atk,
        ("model.json", "attacked.json"),
        &probes,
        &VerifySettings::default(),
    )?;
    io::write_atomic(&dir.join("report.json"), to_json(&report).as_bytes())?;

    let layer = attack.tap_layer.clone();
    let tap = (attack.row, attack.col);
    let region = Region::cell(attack.row, attack.col);
    let variants = [CamVariant::Gap, CamVariant::Elementwise];
    let mut post_identical = [0usize; 2];
    let mut pre_divergent = [0usize; 2];
    let mut spearmans: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let (mut corner_hits, mut quadrant_hits) = (0, 0);
    let mut csv = String::from(
        "image,label,variant,score,pearson,spearman,max_abs_diff,argmax_distance,mass_original,mass_attacked\n",
    );
    for (n, (x, &label)) in test.images.iter().zip(&test.labels).enumerate() {
        let img_dir = dir.join("panels").join(format!("img_{n:03}"));
        io::create_dir(&img_dir)?;
        let (ta, tb) = (orig.forward(x)?, atk.forward(x)?);
        let mut grads = Vec::new();
        for kind in [ScoreKind::Pre, ScoreKind::Post] {
            let sel = ScoreSelector { kind, class: label };
            grads.push((
                sel,
                orig.activation_gradients(&ta, sel)?,
                atk.activation_gradients(&tb, sel)?,
            ));
        }
        for (v, &variant) in variants.iter().enumerate() {
            let mut cells: Vec<[Tensor; 2]> = Vec::new();
            for (sel, ga, gb) in &grads {
                let ha = grad_cam_from(&net, &ta, ga, *sel, &layer, variant)?;
                let hb = grad_cam_from(&net, &tb, gb, *sel, &layer, variant)?;
                let (ra, rb) = (prepare(&ha.grid), prepare(&hb.grid));
                for (tag, h, r) in [("original", &ha, &ra), ("attacked", &hb, &rb)] {
                    let grid = GridFile {
                        method: "gradcam".to_string(),
                        variant: Some(variant.as_str().to_string()),
                        score: sel.kind.as_str().to_string(),
                        class: label,
                        layer: layer.clone(),
                        zero_map: r.zero_map,
                        values: h.grid.clone(),
                    };
                    let name = format!("{}_{}_{tag}.values.json", variant.as_str(), sel.kind.as_str());
                    io::write_atomic(&img_dir.join(name), write_grid(&grid).as_bytes())?;
                }
                let (ca, cb) = (overlay(x, &ra)?, overlay(x, &rb)?);
                let cmp = compare_heatmaps(&ha.grid, &hb.grid, region)?;
                match sel.kind {
                    ScoreKind::Post => {
                        if ppm_bytes(&ca)? == ppm_bytes(&cb)? {
                            post_identical[v] += 1;
                        }
                        if variant == CamVariant::Elementwise
                            && peak(&ha.grid).is_some_and(|(r, c)| {
                                quadrant_label(r, c, ha.grid.shape()[0], ha.grid.shape()[1]) == label
                            })
                        {
                            quadrant_hits += 1;
                        }
                    }
                    ScoreKind::Pre => {
                        let divergent = match cmp.spearman {
                            Some(s) => s < SPEARMAN_THRESHOLD,
                            None => cmp.max_abs_diff > 0.0,
                        };
                        if divergent {
                            pre_divergent[v] += 1;
                        }
                        spearmans[v].extend(cmp.spearman);
                        if variant == CamVariant::Elementwise && peak(&hb.grid) == Some(tap) {
                            corner_hits += 1;
                        }
                    }
                }
                let _ = writeln!(
                    csv,
                    "{n},{label},{},{},{},{},{:.6e},{},{:.6},{:.6}",
                    variant.as_str(),
                    sel.kind.as_str(),
                    fmt_opt(cmp.pearson),
                    fmt_opt(cmp.spearman),
                    cmp.max_abs_diff,
                    cmp.argmax_distance,
                    cmp.mass_in_region_a,
                    cmp.mass_in_region_b
                );
                cells.push([ca, cb]);
            }
            let grid: [[Tensor; 2]; 2] = [cells[0].clone(), cells[1].clone()];
            io::write_atomic(
                &img_dir.join(format!("{}.ppm", variant.as_str())),
                &ppm_bytes(&panel(&grid)?)?,
            )?;
        }
    }
    io::write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;

    let images = test.len().max(1) as f64;
    let mut criteria = report.criteria.clone();
    criteria.push(Criterion::at_least(
        "train_accuracy",
        metrics.result.final_accuracy,
        TRAIN_ACCURACY_THRESHOLD,
    ));
    criteria.push(Criterion::at_least(
        "corner_hit_rate",
        corner_hits as f64 / images,
        CORNER_HIT_THRESHOLD,
    ));
    criteria.push(Criterion::at_least(
        "quadrant_precondition",
        quadrant_hits as f64 / images,
        QUADRANT_THRESHOLD,
    ));
    for (v, variant) in variants.iter().enumerate() {
        criteria.push(Criterion::at_least(
            &format!("post_panels_identical_{}", variant.as_str()),
            post_identical[v] as f64 / images,
            1.0,
        ));
    }
    // One changed cell barely moves the rank order of an elementwise map, so
    // Spearman divergence is judged on the gap variant only.
    criteria.push(Criterion::at_least(
        "pre_divergence_gap",
        pre_divergent[0] as f64 / images,
        PRE_DIVERGENCE_THRESHOLD,
    ));
    let summary = DemoSummary {
        format: DEMO_FORMAT.to_string(),
        version: REPORT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: DemoConfig {
            seed: args.seed,
            image_size: args.size,
            train_count: args.count,
            test_count: test.len(),
            test_seed,
            train: cfg,
            attack: AttackEcho {
                tap_layer: attack.tap_layer.clone(),
                i0: attack.row,
                j0: attack.col,
                k: attack.gain,
                shifted_class: None,
            },
            gradcam_layer: layer,
            spearman_threshold: SPEARMAN_THRESHOLD,
        },
        train_accuracy: metrics.result.final_accuracy,
        loss_curve: metrics.result.loss_curve.clone(),
        images: test.len(),
        corner_hits,
        quadrant_hits,
        variants: variants
            .iter()
            .enumerate()
            .map(|(v, variant)| VariantSummary {
                variant: variant.as_str().to_string(),
                post_identical: post_identical[v],
                pre_divergent: pre_divergent[v],
                pre_spearman_median: median(spearmans[v].clone()),
            })
            .collect(),
        passed: criteria.iter().all(|c| c.passed),
        criteria,
    };
    io::write_atomic(&dir.join("demo.json"), to_json(&summary).as_bytes())?;
    for c in &summary.criteria {
        crate::say(format_args!(
            "{} {}: {:e} (bound {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        ));
    }
    Ok(verdict(&summary.criteria))
}
