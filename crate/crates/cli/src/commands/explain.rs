use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use logitshift::attribution::{grad_cam, integrated_gradients, saliency, CamVariant};
use logitshift::formats::grid::{write_grid, GridFile};
use logitshift::{Classifier, Model, ScoreKind, ScoreSelector, Tensor};

use crate::commands::verify::channel_abs_sum;
use crate::io;
use crate::render::{overlay, pgm_bytes, ppm_bytes, prepare};
use crate::Status;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Saliency,
    Gradcam,
    Ig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Gap,
    Elementwise,
}

impl From<VariantArg> for CamVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Gap => CamVariant::Gap,
            VariantArg::Elementwise => CamVariant::Elementwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Pre,
    Post,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Pre => ScoreKind::Pre,
            ScoreArg::Post => ScoreKind::Post,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PGM or PPM image; color is converted to gray.
    #[arg(long)]
    pub image: PathBuf,
    /// Class to explain [default: the predicted class]
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Grad-CAM variant.
    #[arg(long, value_enum, default_value_t = VariantArg::Gap)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = ScoreArg::Post)]
    pub score: ScoreArg,
    /// Grad-CAM layer [default: the last max-pool]
    #[arg(long)]
    pub layer: Option<String>,
    /// Integrated-gradients steps (all-zero baseline).
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// Writes PREFIX.values.json, PREFIX.pgm and PREFIX.overlay.ppm.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

pub struct Explanation {
    /// Raw `H x W` map: the rectified Grad-CAM grid, or the channel sum of
    /// the input attribution.
    pub values: Tensor,
    /// Map that is rendered: the grid itself, or `|attribution|` summed
    /// over channels.
    pub display: Tensor,
    pub grid: GridFile,
}

pub fn explain(model: &Model, image: &Tensor, args: &ExplainArgs) -> Result<Explanation> {
    let net = model.base();
    let class = match args.class {
        Some(c) if c >= net.class_count() => {
            bail!("class {c} is out of range for {} classes", net.class_count())
        }
        Some(c) => c,
        None => model.predict(image)?,
    };
    let kind = ScoreKind::from(args.score);
    let sum_channels = |t: &Tensor| -> Result<Tensor> { Ok(t.reduce_sum(&[2])?) };
    let (method, variant, layer, values, display) = match args.method {
        Method::Gradcam => {
            let layer = match &args.layer {
                Some(l) => l.clone(),
                None => match net.last_pool() {
                    Some(i) => net.activation_name(i).to_string(),
                    None => bail!("the model has no max-pool layer; pass --layer"),
                },
            };
            let h = grad_cam(model, image, class, &layer, kind, args.variant.into())?;
            let v = CamVariant::from(args.variant).as_str().to_string();
            ("gradcam", Some(v), layer, h.grid.clone(), h.grid)
        }
        Method::Saliency => {
            let m = saliency(model, image, ScoreSelector { kind, class })?;
            (
                "saliency",
                None,
                "input".to_string(),
                sum_channels(&m.values)?,
                channel_abs_sum(&m.values)?,
            )
        }
        Method::Ig => {
            let baseline = Tensor::zeros(image.shape());
            let m = integrated_gradients(model, image, &baseline, class, args.steps, kind)?;
            (
                "integrated_gradients",
                None,
                "input".to_string(),
                sum_channels(&m.values)?,
                channel_abs_sum(&m.values)?,
            )
        }
    };
    let zero_map = prepare(&display).zero_map;
    Ok(Explanation {
        grid: GridFile {
            method: method.to_string(),
            variant,
            score: kind.as_str().to_string(),
            class,
            layer,
            zero_map,
            values: values.clone(),
        },
        values,
        display,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(args: &ExplainArgs) -> Result<Status> {
    let model = io::load_model(&args.model)?;
    let image = io::load_image(&args.image, model.base().input_shape())?;
    let e = explain(&model, &image, args)?;
    let rendered = prepare(&e.display);
    io::write_atomic(
        &with_suffix(&args.out_prefix, ".values.json"),
        write_grid(&e.grid).as_bytes(),
    )?;
    io::write_atomic(&with_suffix(&args.out_prefix, ".pgm"), &pgm_bytes(&rendered.map)?)?;
    io::write_atomic(
        &with_suffix(&args.out_prefix, ".overlay.ppm"),
        &ppm_bytes(&overlay(&image, &rendered)?)?,
    )?;
    let argmax = e.values.argmax_flat()?;
    let w = e.values.shape()[1];
    crate::say(format_args!(
        "{} class {} ({} score): argmax at ({}, {}){}",
        e.grid.method,
        e.grid.class,
        e.grid.score,
        argmax / w,
        argmax % w,
        if e.grid.zero_map { ", zero map" } else { "" }
    ));
    Ok(Status::Passed)
}
