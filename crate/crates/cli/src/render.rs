//! Heatmap rendering: layer-resolution grayscale, input-resolution overlays
//! and 2x2 comparison panels.

use anyhow::Result;
use logitshift::attribution::{normalize, upsample};
use logitshift::formats::pnm::{encode, PnmImage, PnmKind};
use logitshift::Tensor;

/// Gap between panel cells, in pixels.
pub const PANEL_GAP: usize = 2;

/// A heatmap ready for display: values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub map: Tensor,
    pub zero_map: bool,
}

pub fn prepare(grid: &Tensor) -> Rendered {
    let n = normalize(grid);
    Rendered {
        map: n.map.map(|v| v.clamp(0.0, 1.0)),
        zero_map: n.zero_map,
    }
}

pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    Ok(encode(&PnmImage::from_gray(map, 255)?, PnmKind::P5)?)
}

pub fn ppm_bytes(rgb: &Tensor) -> Result<Vec<u8>> {
    Ok(encode(&PnmImage::from_rgb(rgb, 255)?, PnmKind::P6)?)
}

/// `0.5 * gray + 0.5 * red(heat)` at the image's resolution.
pub fn overlay(image: &Tensor, heat: &Rendered) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let heat = upsample(&heat.map, h, w)?;
    let gray = prepare(&image.reshape(&[h, w])?).map;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for (&g, &r) in gray.data().iter().zip(heat.data()) {
        rgb.extend_from_slice(&[0.5 * g + 0.5 * r, 0.5 * g, 0.5 * g]);
    }
    Ok(Tensor::new(vec![h, w, 3], rgb)?)
}

/// Tile `cells[row][col]` (equal `H x W x 3` tensors) on a white
/// background.
pub fn panel(cells: &[[Tensor; 2]; 2]) -> Result<Tensor> {
    let (h, w) = (cells[0][0].shape()[0], cells[0][0].shape()[1]);
    let (ph, pw) = (2 * h + PANEL_GAP, 2 * w + PANEL_GAP);
    let mut out = vec![1.0; ph * pw * 3];
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (oy, ox) = (r * (h + PANEL_GAP), c * (w + PANEL_GAP));
            for y in 0..h {
                let src = &cell.data()[y * w * 3..(y + 1) * w * 3];
                let start = ((oy + y) * pw + ox) * 3;
                out[start..start + w * 3].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::new(vec![ph, pw, 3], out)?)
}
