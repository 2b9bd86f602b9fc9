use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use clap::Args;
use logitshift::trainer::{gen_blob_dataset, init_network, train_sgd, TrainConfig, TrainReport};
use logitshift::{Model, Network};
use serde::Serialize;

use crate::io;
use crate::report::to_json;
use crate::Status;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Seeds the dataset, the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Training images.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve record [default: OUT with extension `metrics.json`]
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetEcho {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainMetrics {
    pub format: &'static str,
    pub version: u32,
    pub tool_version: &'static str,
    pub dataset: DatasetEcho,
    pub init_seed: u64,
    pub config: TrainConfig,
    #[serde(flatten)]
    pub result: TrainReport,
}

/// Generate the blob dataset, initialize and train. One seed drives all
/// three random sources.
pub fn train_reference(seed: u64, size: usize, count: usize, cfg: &TrainConfig) -> Result<(Network, TrainMetrics)> {
    let data = gen_blob_dataset(count, size, seed)?;
    let mut net = init_network(size, seed)?;
    let result = train_sgd(&mut net, &data, cfg)?;
    let metrics = TrainMetrics {
        format: "logitshift-train-metrics",
        version: 1,
        tool_version: crate::report::TOOL_VERSION,
        dataset: DatasetEcho {
            count,
            image_size: size,
            seed,
        },
        init_seed: seed,
        config: cfg.clone(),
        result,
    };
    Ok((net, metrics))
}

pub fn run(args: &TrainArgs) -> Result<Status> {
    let cfg = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
    };
    let (net, metrics) = train_reference(args.seed, args.size, args.count, &cfg)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.json"));
    io::save_model(&args.out, &Model::Plain(Arc::new(net)))?;
    io::write_atomic(&metrics_path, to_json(&metrics).as_bytes())?;
    crate::say(format_args!(
        "trained {} steps, final loss {:.6}, accuracy {:.4}",
        metrics.result.steps,
        metrics.result.loss_curve.last().copied().unwrap_or(f64::NAN),
        metrics.result.final_accuracy
    ));
    Ok(Status::Passed)
}
