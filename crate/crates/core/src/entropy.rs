//! Local measurement entropy. Each encoded stream is collapsed to one 8-bit
//! channel, split into patches, and scored by the Shannon entropy of the
//! patch histogram (256 bins, log base 2, so values live in [0, 8] bits).
//! The per-patch value is broadcast to every pixel of its patch, which gives
//! a full-resolution map the fusion gates can consume.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ENTROPY_BINS: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct EntropyConfig {
    pub patch_h: usize,
    pub patch_w: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { patch_h: 16, patch_w: 16 }
    }
}

/// Per-pixel entropy in bits, shape [1, H, W].
#[derive(Debug, Clone)]
pub struct EntropyMap {
    pub values: Tensor,
}

impl EntropyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn mean(&self) -> f64 {
        let mut acc = 0.0f64;
        for &v in self.values.data() {
            acc += v as f64;
        }
        acc / self.values.numel() as f64
    }

    /// 8-bit grayscale PGM dump, 8 bits of entropy mapping to white.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "P5\n{w} {h}\n255")?;
        let bytes: Vec<u8> = self
            .values
            .data()
            .iter()
            .map(|&v| ((v / 8.0).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

/// Collapses [C,H,W] (values in [0,1]) to one 8-bit channel: channels are
/// averaged, then mapped by floor(v*255 + 0.5). Out-of-range inputs clamp;
/// the clamp count is reported for diagnostics.
pub fn quantize8(stream: &Tensor) -> Result<(Tensor, u64)> {
    let s = stream.shape();
    if s.len() != 3 {
        return Err(Error::shape("quantize8", format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let mut clamped = 0u64;
    let mut out = vec![0.0f32; hw];
    for i in 0..hw {
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += stream.data()[ch * hw + i] as f64;
        }
        let mut v = (acc / c as f64) as f32;
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
            v = v.clamp(0.0, 1.0);
        }
        out[i] = (v * 255.0 + 0.5).floor();
    }
    Ok((Tensor::from_vec(vec![1, h, w], out)?, clamped))
}

/// Shannon entropy of each patch histogram, broadcast back to pixel
/// resolution. The input must already be quantized to integer levels 0..255.
/// When the patch grid does not divide the image, the image is zero-padded on
/// the bottom/right for the histogram pass and the padding is cropped away
/// from the returned map.
pub fn entropy_map(quantized: &Tensor, cfg: &EntropyConfig) -> Result<EntropyMap> {
    let s = quantized.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("entropy_map", format!("expected [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if cfg.patch_h == 0 || cfg.patch_w == 0 {
        return Err(Error::shape("entropy_map", "patch extents must be positive".to_string()));
    }
    let ph = h.div_ceil(cfg.patch_h);
    let pw = w.div_ceil(cfg.patch_w);

    let mut out = vec![0.0f32; h * w];
    let mut hist = [0u32; ENTROPY_BINS];
    for py in 0..ph {
        for px in 0..pw {
            hist.fill(0);
            for dy in 0..cfg.patch_h {
                for dx in 0..cfg.patch_w {
                    let (y, x) = (py * cfg.patch_h + dy, px * cfg.patch_w + dx);
                    let level = if y < h && x < w {
                        quantized.data()[y * w + x] as usize
                    } else {
                        0
                    };
                    hist[level.min(ENTROPY_BINS - 1)] += 1;
                }
            }
            let total = (cfg.patch_h * cfg.patch_w) as f64;
            let mut rho = 0.0f64;
            for &count in hist.iter() {
                if count > 0 {
                    let p = count as f64 / total;
                    rho -= p * p.log2();
                }
            }
            let rho = rho as f32;
            for dy in 0..cfg.patch_h {
                let y = py * cfg.patch_h + dy;
                if y >= h {
                    break;
                }
                for dx in 0..cfg.patch_w {
                    let x = px * cfg.patch_w + dx;
                    if x >= w {
                        break;
                    }
                    out[y * w + x] = rho;
                }
            }
        }
    }
    Ok(EntropyMap { values: Tensor::from_vec(vec![1, h, w], out)? })
}

/// Quantizes and scores a stream in one step.
pub fn stream_entropy(stream: &Tensor, cfg: &EntropyConfig) -> Result<EntropyMap> {
    let (q, _) = quantize8(stream)?;
    entropy_map(&q, cfg)
}

/// Mean entropy of a stream relative to a clear-weather reference recording.
pub fn normalized_entropy(stream: &EntropyMap, clear_reference: &EntropyMap) -> Result<f64> {
    if stream.values.shape() != clear_reference.values.shape() {
        return Err(Error::shape(
            "normalized_entropy",
            format!(
                "map shapes {:?} and {:?} differ",
                stream.values.shape(),
                clear_reference.values.shape()
            ),
        ));
    }
    let denom = clear_reference.mean();
    if denom <= 0.0 {
        return Err(Error::ZeroEntropyReference);
    }
    Ok(stream.mean() / denom)
}
