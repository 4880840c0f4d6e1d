//! Built-in image embedder used when no precomputed features are available.
//!
//! Layout of the 640-dimensional vector:
//!
//! * `[0, 512)`: joint RGB histogram with 8 bins per channel (`r/32`,
//!   `g/32`, `b/32`, index `64 r + 8 g + b`), as pixel fractions.
//! * `[512, 640)`: for each cell of a 4×4 grid over the luma image resized
//!   to 64×64, an 8-bin histogram of gradient orientation weighted by
//!   gradient magnitude (central differences, clamped at borders, bins of
//!   45° starting at 0 rad). Magnitudes are divided by 255 × 4096.
//!
//! The whole vector is then scaled to unit L2 norm.

use alloc::vec;
use alloc::vec::Vec;

use crate::phash::{resize_bilinear, GrayImage, HashError};

pub const COLOR_BINS: usize = 512;
pub const GRID: usize = 4;
pub const ORIENTATIONS: usize = 8;
pub const BUILTIN_DIM: usize = COLOR_BINS + GRID * GRID * ORIENTATIONS;
const GRADIENT_SIDE: usize = 64;

/// Embeds an interleaved 8-bit RGB image.
pub fn builtin_embedding(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<f64>, HashError> {
    let gray = GrayImage::from_rgb8(width, height, rgb)?;
    let mut out = vec![0.0; BUILTIN_DIM];

    let npix = (width * height) as f64;
    for p in rgb.chunks_exact(3) {
        let bin = usize::from(p[0] >> 5) * 64 + usize::from(p[1] >> 5) * 8 + usize::from(p[2] >> 5);
        out[bin] += 1.0;
    }
    for v in &mut out[..COLOR_BINS] {
        *v /= npix;
    }

    let small = resize_bilinear(&gray, GRADIENT_SIDE, GRADIENT_SIDE);
    let last = GRADIENT_SIDE - 1;
    let scale = 255.0 * (GRADIENT_SIDE * GRADIENT_SIDE) as f64;
    let sector = core::f64::consts::TAU / ORIENTATIONS as f64;
    for y in 0..GRADIENT_SIDE {
        for x in 0..GRADIENT_SIDE {
            let gx = small.get((x + 1).min(last), y) - small.get(x.saturating_sub(1), y);
            let gy = small.get(x, (y + 1).min(last)) - small.get(x, y.saturating_sub(1));
            let magnitude = libm::sqrt(gx * gx + gy * gy);
            if magnitude == 0.0 {
                continue;
            }
            let mut angle = libm::atan2(gy, gx);
            if angle < 0.0 {
                angle += core::f64::consts::TAU;
            }
            let bin = ((angle / sector) as usize).min(ORIENTATIONS - 1);
            let cell = (y * GRID / GRADIENT_SIDE) * GRID + x * GRID / GRADIENT_SIDE;
            out[COLOR_BINS + cell * ORIENTATIONS + bin] += magnitude / scale;
        }
    }

    let norm = libm::sqrt(out.iter().map(|v| v * v).sum());
    for v in &mut out {
        *v /= norm;
    }
    Ok(out)
}
