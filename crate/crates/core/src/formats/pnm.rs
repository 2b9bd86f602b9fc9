//! Netpbm grayscale (P2/P5) and color (P3/P6) images.
//!
//! Header fields are separated by whitespace; `#` starts a comment that runs
//! to the end of the line. Binary samples are one byte for maxval < 256 and
//! two big-endian bytes otherwise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// ASCII graymap.
    P2,
    /// ASCII pixmap.
    P3,
    /// Binary graymap.
    P5,
    /// Binary pixmap.
    P6,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::P2 | PnmKind::P5 => 1,
            PnmKind::P3 | PnmKind::P6 => 3,
        }
    }

    pub fn is_ascii(self) -> bool {
        matches!(self, PnmKind::P2 | PnmKind::P3)
    }

    fn magic(self) -> &'static str {
        match self {
            PnmKind::P2 => "P2",
            PnmKind::P3 => "P3",
            PnmKind::P5 => "P5",
            PnmKind::P6 => "P6",
        }
    }
}

/// Decoded image with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl PnmImage {
    pub fn new(width: usize, height: usize, channels: usize, maxval: u16, samples: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidShape(format!("image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidShape(format!("{channels} channels")));
        }
        if maxval == 0 {
            return Err(Error::InvalidConfig("maxval must be positive".to_string()));
        }
        if samples.len() != width * height * channels {
            return Err(Error::InvalidShape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        if let Some(&s) = samples.iter().find(|&&s| s > maxval) {
            return Err(Error::InvalidConfig(format!("sample {s} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval,
            samples,
        })
    }

    /// `H x W x 1` tensor in `[0, 1]`; color is reduced with Rec. 601 luma
    /// weights.
    pub fn to_gray_tensor(&self) -> Tensor {
        let scale = f64::from(self.maxval);
        let data = self
            .samples
            .chunks(self.channels)
            .map(|px| match px {
                [g] => f64::from(*g) / scale,
                [r, g, b] => (0.299 * f64::from(*r) + 0.587 * f64::from(*g) + 0.114 * f64::from(*b)) / scale,
                _ => unreachable!("channels is 1 or 3"),
            })
            .collect();
        Tensor::from_parts(vec![self.height, self.width, 1], data)
    }

    /// Quantize an `H x W` (or `H x W x 1`) tensor with values in `[0, 1]`.
    pub fn from_gray(t: &Tensor, maxval: u16) -> Result<Self> {
        let (h, w) = spatial(t, 1)?;
        Self::new(w, h, 1, maxval, quantize(t.data(), maxval))
    }

    /// Quantize an `H x W x 3` tensor with values in `[0, 1]`.
    pub fn from_rgb(t: &Tensor, maxval: u16) -> Result<Self> {
        let (h, w) = spatial(t, 3)?;
        Self::new(w, h, 3, maxval, quantize(t.data(), maxval))
    }
}

fn spatial(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] if channels == 1 => Ok((h, w)),
        [h, w, c] if c == channels => Ok((h, w)),
        _ => Err(Error::InvalidShape(format!(
            "expected H x W x {channels} image tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn quantize(values: &[f64], maxval: u16) -> Vec<u16> {
    let m = f64::from(maxval);
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(u64::from(b - b'0')))
                .ok_or_else(|| Error::Parse(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Parse(format!("expected {what}")));
        }
        Ok(value)
    }
}

/// Decode a P2, P3, P5 or P6 file.
pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    let kind = match bytes.get(..2) {
        Some(b"P2") => PnmKind::P2,
        Some(b"P3") => PnmKind::P3,
        Some(b"P5") => PnmKind::P5,
        Some(b"P6") => PnmKind::P6,
        _ => return Err(Error::Parse("not a P2/P3/P5/P6 netpbm file".to_string())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    match bytes.get(2) {
        Some(b) if b.is_ascii_whitespace() || *b == b'#' => {}
        _ => return Err(Error::Parse("missing whitespace after magic number".to_string())),
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("zero image dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("maxval {maxval} outside 1..=65535")));
    }
    let channels = kind.channels() as u64;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Parse("image dimensions overflow".to_string()))?;
    let remaining = (bytes.len() - cur.pos) as u64;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let mut samples = Vec::new();
    if kind.is_ascii() {
        // every ASCII sample needs at least one digit
        if count > remaining {
            return Err(Error::Parse("truncated sample data".to_string()));
        }
        samples.reserve(count as usize);
        for _ in 0..count {
            let s = cur.number("sample")?;
            if s > maxval {
                return Err(Error::Parse(format!("sample {s} exceeds maxval {maxval}")));
            }
            samples.push(s as u16);
        }
    } else {
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Parse("missing whitespace before raster".to_string())),
        }
        let needed = count
            .checked_mul(sample_bytes)
            .ok_or_else(|| Error::Parse("image dimensions overflow".to_string()))?;
        let raster = &bytes[cur.pos..];
        if (raster.len() as u64) < needed {
            return Err(Error::Parse(format!(
                "raster has {} bytes, expected {needed}",
                raster.len()
            )));
        }
        let raster = &raster[..needed as usize];
        samples = if sample_bytes == 1 {
            raster.iter().map(|&b| u16::from(b)).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|p| u16::from_be_bytes([p[0], p[1]]))
                .collect()
        };
        if let Some(&s) = samples.iter().find(|&&s| u64::from(s) > maxval) {
            return Err(Error::Parse(format!("sample {s} exceeds maxval {maxval}")));
        }
    }
    PnmImage::new(
        width as usize,
        height as usize,
        channels as usize,
        maxval as u16,
        samples,
    )
}

/// Encode in the given variant. The variant's channel count must match.
pub fn encode(img: &PnmImage, kind: PnmKind) -> Result<Vec<u8>> {
    if kind.channels() != img.channels {
        return Err(Error::InvalidConfig(format!(
            "{} needs {} channels, image has {}",
            kind.magic(),
            kind.channels(),
            img.channels
        )));
    }
    let mut out = format!("{}\n{} {}\n{}\n", kind.magic(), img.width, img.height, img.maxval).into_bytes();
    if kind.is_ascii() {
        let row_len = img.width * img.channels;
        for row in img.samples.chunks(row_len) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    } else if img.maxval < 256 {
        out.extend(img.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    Ok(out)
}
