//! File helpers. Every output goes through [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use logitshift::formats::{model, pnm};
use logitshift::{Model, Tensor};

/// Write to a temporary file in the destination directory, then rename it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".logitshift-")
        .tempfile_in(dir)
        .with_context(|| format!("cannot create a file in {}", dir.display()))?;
    tmp.write_all(bytes)
        .and_then(|()| tmp.as_file().sync_all())
        .with_context(|| format!("writing {}", path.display()))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path)
        .map_err(|e| anyhow!(e.error).context(format!("cannot write {}", path.display())))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<Model> {
    model::parse(&read(path)?).with_context(|| format!("loading model {}", path.display()))
}

pub fn save_model(path: &Path, m: &Model) -> Result<()> {
    write_atomic(path, model::write(m).as_bytes())
}

/// Grayscale `H x W x 1` tensor in `[0, 1]` matching `input_shape`.
pub fn load_image(path: &Path, input_shape: &[usize]) -> Result<Tensor> {
    let img = pnm::decode(&read(path)?).with_context(|| format!("decoding image {}", path.display()))?;
    let t = img.to_gray_tensor();
    if t.shape() != input_shape {
        bail!(
            "image {} is {}x{}, the model expects input shape {:?}",
            path.display(),
            img.height,
            img.width,
            input_shape
        );
    }
    Ok(t)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create directory {}", path.display()))
}
