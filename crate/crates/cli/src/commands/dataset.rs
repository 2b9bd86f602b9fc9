use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use logitshift::formats::dataset::{write_dataset, DatasetEntry, DatasetManifest};
use logitshift::formats::pnm::{encode, PnmImage, PnmKind};
use logitshift::trainer::gen_blob_dataset;

use crate::io;
use crate::Status;

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// 16-bit binary PGM files plus `manifest.json`.
pub fn run(args: &DatasetArgs) -> Result<Status> {
    let data = gen_blob_dataset(args.count, args.size, args.seed)?;
    io::create_dir(&args.out_dir)?;
    let mut images = Vec::with_capacity(data.len());
    for (n, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let file = format!("img_{n:05}.pgm");
        let bytes = encode(&PnmImage::from_gray(img, u16::MAX)?, PnmKind::P5)?;
        io::write_atomic(&args.out_dir.join(&file), &bytes)?;
        images.push(DatasetEntry { file, label });
    }
    let manifest = DatasetManifest {
        seed: Some(args.seed),
        image_size: args.size,
        images,
    };
    io::write_atomic(&args.out_dir.join("manifest.json"), write_dataset(&manifest).as_bytes())?;
    crate::say(format_args!(
        "wrote {} images to {}",
        data.len(),
        args.out_dir.display()
    ));
    Ok(Status::Passed)
}
