use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use logitshift::surgery::{apply_logit_shift, single_class_shift, AttackConfig, DEFAULT_GAIN};
use logitshift::Model;

use crate::io;
use crate::Status;

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Gain of the shift branch.
    #[arg(long, default_value_t = DEFAULT_GAIN)]
    pub k: f64,
    #[arg(long, default_value_t = 0)]
    pub tap_i: usize,
    #[arg(long, default_value_t = 0)]
    pub tap_j: usize,
    /// Layer whose output is tapped [default: the last max-pool]
    #[arg(long)]
    pub tap_layer: Option<String>,
    /// Shift only this class's logit. Breaks equivalence on purpose; for
    /// negative controls.
    #[arg(long)]
    pub shift_class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &AttackArgs) -> Result<Status> {
    let model = io::load_model(&args.model)?;
    let Model::Plain(net) = model else {
        bail!("{} already carries an attack stanza", args.model.display());
    };
    let mut cfg = AttackConfig::default_for(&net)?;
    cfg.gain = args.k;
    cfg.row = args.tap_i;
    cfg.col = args.tap_j;
    if let Some(layer) = &args.tap_layer {
        cfg.tap_layer = layer.clone();
    }
    let attacked = match args.shift_class {
        None => apply_logit_shift(net, &cfg)?,
        Some(c) => single_class_shift(net, &cfg, c)?,
    };
    io::save_model(&args.out, &Model::Attacked(attacked))?;
    crate::say(format_args!(
        "attack: tap {}[{}, {}], K = {}",
        cfg.tap_layer, cfg.row, cfg.col, cfg.gain
    ));
    Ok(Status::Passed)
}
