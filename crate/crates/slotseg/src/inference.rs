//! From attention maps to pixel masks. A patch relevance vector is selected
//! per scheme, reshaped onto the patch grid, bilinearly upsampled, min-max
//! rescaled, and thresholded — in that order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    /// Row-major, one byte per pixel, each 0 or 1.
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {}x{}", bits.len(), height, width),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::domain("mask", "bits must be 0 or 1"));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Each cell becomes a scale×scale block. Binary masks stay binary;
    /// this is how a patch-level ground truth becomes pixel-level.
    pub fn upscale_blocks(&self, scale: usize) -> Result<Mask> {
        if scale == 0 {
            return Err(Error::domain("upscale_blocks", "zero scale"));
        }
        let (h, w) = (self.height * scale, self.width * scale);
        let mut bits = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                bits[y * w + x] = self.bits[(y / scale) * self.width + x / scale];
            }
        }
        Mask::new(h, w, bits)
    }

    /// Exact inverse of upscale_blocks: every scale×scale block must be
    /// constant, so nothing is invented or lost.
    pub fn downscale_blocks(&self, scale: usize) -> Result<Mask> {
        if scale == 0 || self.height % scale != 0 || self.width % scale != 0 {
            return Err(Error::domain(
                "downscale_blocks",
                format!("{}x{} not divisible by {}", self.height, self.width, scale),
            ));
        }
        let (h, w) = (self.height / scale, self.width / scale);
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let head = self.bits[y * scale * self.width + x * scale];
                for dy in 0..scale {
                    for dx in 0..scale {
                        if self.bits[(y * scale + dy) * self.width + x * scale + dx] != head {
                            return Err(Error::domain(
                                "downscale_blocks",
                                format!("mixed block at patch ({y},{x})"),
                            ));
                        }
                    }
                }
                bits.push(head);
            }
        }
        Mask::new(h, w, bits)
    }
}

/// Bilinear interpolation with half-pixel centers: output pixel i samples
/// source coordinate (i + 0.5)·in/out − 0.5, clamped to the valid range.
/// Horizontal lerp first, then vertical.
pub fn bilinear_upsample(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::domain("bilinear_upsample", "empty extent"));
    }
    if src.len() != in_h * in_w {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("{} values for {}x{}", src.len(), in_h, in_w),
        ));
    }
    let coords = |out: usize, inn: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * inn as f64 / out as f64 - 0.5)
                    .clamp(0.0, (inn - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, in_h);
    let xs = coords(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = src[y0 * in_w + x0];
            let v01 = src[y0 * in_w + x1];
            let v10 = src[y1 * in_w + x0];
            let v11 = src[y1 * in_w + x1];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out.push(top + fy * (bot - top));
        }
    }
    Ok(out)
}

/// Patch relevance under the chosen scheme: Compose weights slot maps by the
/// fusion attention, Avg weights them uniformly, Max/Min take the single map
/// whose fusion weight is extreme (ties resolve to the lowest slot index).
fn relevance<S: Scalar>(a_slot: &Tensor<S>, a_fuse: &[f64], scheme: Scheme) -> Vec<f64> {
    let k = a_fuse.len();
    let n = a_slot.len() / k;
    let col = |idx: usize| -> Vec<f64> {
        (0..n).map(|p| a_slot.data[p * k + idx].to_f64()).collect()
    };
    match scheme {
        Scheme::Compose => (0..n)
            .map(|p| {
                (0..k)
                    .map(|j| a_slot.data[p * k + j].to_f64() * a_fuse[j])
                    .sum()
            })
            .collect(),
        Scheme::Avg => {
            let w = 1.0 / k as f64;
            (0..n)
                .map(|p| (0..k).map(|j| a_slot.data[p * k + j].to_f64() * w).sum())
                .collect()
        }
        Scheme::Max => {
            let mut best = 0;
            for j in 1..k {
                if a_fuse[j] > a_fuse[best] {
                    best = j;
                }
            }
            col(best)
        }
        Scheme::Min => {
            let mut best = 0;
            for j in 1..k {
                if a_fuse[j] < a_fuse[best] {
                    best = j;
                }
            }
            col(best)
        }
    }
}

/// N×K patch-to-slot attention plus the K fusion weights → binary mask at
/// (out_h, out_w). A constant relevance map carries no localization signal
/// and yields the all-zero mask.
#[allow(clippy::too_many_arguments)]
pub fn predict_mask<S: Scalar>(
    a_slot: &Tensor<S>,
    a_fuse: &Tensor<S>,
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
    tau: f64,
    scheme: Scheme,
) -> Result<Mask> {
    let k = a_fuse.len();
    if k == 0 {
        return Err(Error::shape("predict_mask", "no slots"));
    }
    let (n, ka) = a_slot.dims2("predict_mask")?;
    if ka != k {
        return Err(Error::shape(
            "predict_mask",
            format!("{} slot columns vs {} fusion weights", ka, k),
        ));
    }
    if n != grid_h * grid_w {
        return Err(Error::shape(
            "predict_mask",
            format!("{} patches vs {}x{} grid", n, grid_h, grid_w),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain("predict_mask", format!("tau {tau} not in (0,1)")));
    }
    let fuse: Vec<f64> = a_fuse.data.iter().map(|v| v.to_f64()).collect();
    let v = relevance(a_slot, &fuse, scheme);
    let up = bilinear_upsample(&v, grid_h, grid_w, out_h, out_w)?;
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bits = if hi == lo {
        vec![0u8; up.len()]
    } else {
        up.iter()
            .map(|&x| u8::from((x - lo) / (hi - lo) > tau))
            .collect()
    };
    Mask::new(out_h, out_w, bits)
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(
            "iou",
            format!(
                "{}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

// ---- PGM mask files ----

/// Binary PGM (P5, maxval 255): set pixels are written as 255, clear as 0.
pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b == 1 { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a P5 PGM and binarizes it: any sample above 127 is a set pixel.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let data = fs::read(path)?;
    let fail = |offset: usize, detail: &str| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        detail: detail.to_string(),
    };
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(fail(0, "not a P5 PGM"));
    }
    // Header: three whitespace-separated decimal fields (width, height,
    // maxval), '#' comments allowed, then exactly one whitespace byte.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(fail(start, "expected a decimal header field"));
        }
        let text = std::str::from_utf8(&data[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|_| fail(start, "header field out of range"))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected single whitespace before payload"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(fail(2, "zero extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(2, "maxval must be in 1..=255"));
    }
    let need = width * height;
    let have = data.len() - pos;
    if have != need {
        return Err(fail(
            pos,
            &format!("expected {need} payload bytes, found {have}"),
        ));
    }
    let bits = data[pos..].iter().map(|&b| u8::from(b > 127)).collect();
    Mask::new(height, width, bits)
}
