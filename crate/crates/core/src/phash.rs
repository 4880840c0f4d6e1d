//! DCT perceptual hash.
//!
//! The procedure, fixed bit for bit so hashes agree across platforms:
//!
//! 1. Convert RGB to luma with `0.299 R + 0.587 G + 0.114 B` in `f64`.
//! 2. Resize to 32×32 with a separable triangle (bilinear) filter whose
//!    support widens with the downscale factor.
//! 3. Take the unnormalized 2-D DCT-II and keep the 8×8 lowest-frequency
//!    block, DC term included.
//! 4. Threshold the 64 coefficients at their median (mean of the two middle
//!    values). Coefficient `i` in row-major order sets bit `63 - i`, so the
//!    hex form reads in the same order as the block.
//!
//! Cosines come from `libm`, which is a pure software implementation, so no
//! step depends on the host's math library.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const HASH_SIDE: usize = 32;
const BLOCK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HashError {
    #[error("image has no pixels ({width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("invalid perceptual hash {0:?}: expected 16 lowercase hex characters")]
    Parse(String),
}

/// 64-bit fingerprint of decoded pixel content.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PerceptualHash(pub u64);

impl fmt::Debug for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PerceptualHash({:016x})", self.0)
    }
}

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for PerceptualHash {
    type Err = HashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let valid = s.len() == 16
            && s.bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid {
            return Err(HashError::Parse(s.into()));
        }
        u64::from_str_radix(s, 16)
            .map(PerceptualHash)
            .map_err(|_| HashError::Parse(s.into()))
    }
}

impl Serialize for PerceptualHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerceptualHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of differing bits.
#[inline]
pub fn hamming(a: PerceptualHash, b: PerceptualHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Single-channel image with `f64` intensities in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, HashError> {
        if width == 0 || height == 0 {
            return Err(HashError::Empty { width, height });
        }
        if pixels.len() != width * height {
            return Err(HashError::BufferSize {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Luma of an interleaved 8-bit RGB buffer.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, HashError> {
        if rgb.len() != width * height * 3 {
            return Err(HashError::BufferSize {
                expected: width * height * 3,
                actual: rgb.len(),
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect();
        Self::new(width, height, pixels)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Per-output-sample filter taps: first source index and weights.
fn triangle_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = if scale > 1.0 { scale } else { 1.0 };
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = libm::floor(center - support).max(0.0) as usize;
            let hi = (libm::ceil(center + support) as usize).min(src);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| {
                    let x = (j as f64 + 0.5 - center) / support;
                    let w = 1.0 - libm::fabs(x);
                    if w > 0.0 {
                        w
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                for w in &mut weights {
                    *w /= total;
                }
            } else {
                // Only reachable when src is tiny; fall back to nearest sample.
                let nearest = libm::floor(center).min(src as f64 - 1.0) as usize;
                return (nearest, vec![1.0]);
            }
            (lo, weights)
        })
        .collect()
}

/// Separable triangle-filter resize.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let xtaps = triangle_taps(img.width, width);
    let ytaps = triangle_taps(img.height, height);

    let mut horizontal = vec![0.0; width * img.height];
    for y in 0..img.height {
        let row = &img.pixels[y * img.width..(y + 1) * img.width];
        for (x, (start, weights)) in xtaps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += row[start + k] * w;
            }
            horizontal[y * width + x] = acc;
        }
    }

    let mut out = vec![0.0; width * height];
    for (y, (start, weights)) in ytaps.iter().enumerate() {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                acc += horizontal[(start + k) * width + x] * w;
            }
            out[y * width + x] = acc;
        }
    }
    GrayImage {
        width,
        height,
        pixels: out,
    }
}

fn cosine_table() -> [[f64; HASH_SIDE]; BLOCK] {
    let mut table = [[0.0; HASH_SIDE]; BLOCK];
    for (u, row) in table.iter_mut().enumerate() {
        for (x, c) in row.iter_mut().enumerate() {
            *c = libm::cos(
                core::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * HASH_SIDE) as f64,
            );
        }
    }
    table
}

/// Low-frequency 8×8 block of the DCT-II of a 32×32 image, row-major (v, u).
fn low_frequency_block(img: &GrayImage) -> [f64; BLOCK * BLOCK] {
    debug_assert_eq!((img.width, img.height), (HASH_SIDE, HASH_SIDE));
    let table = cosine_table();
    let mut rows = [[0.0; BLOCK]; HASH_SIDE];
    for (y, out) in rows.iter_mut().enumerate() {
        let line = &img.pixels[y * HASH_SIDE..(y + 1) * HASH_SIDE];
        for (u, o) in out.iter_mut().enumerate() {
            *o = line.iter().zip(table[u].iter()).map(|(p, c)| p * c).sum();
        }
    }
    let mut block = [0.0; BLOCK * BLOCK];
    for v in 0..BLOCK {
        for u in 0..BLOCK {
            block[v * BLOCK + u] = (0..HASH_SIDE).map(|y| table[v][y] * rows[y][u]).sum();
        }
    }
    block
}

/// Perceptual hash of a grayscale image.
pub fn phash(img: &GrayImage) -> Result<PerceptualHash, HashError> {
    if img.width == 0 || img.height == 0 {
        return Err(HashError::Empty {
            width: img.width,
            height: img.height,
        });
    }
    let small = resize_bilinear(img, HASH_SIDE, HASH_SIDE);
    let block = low_frequency_block(&small);

    let mut sorted = block;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;

    let mut bits = 0u64;
    for (i, c) in block.iter().enumerate() {
        if *c > median {
            bits |= 1 << (63 - i);
        }
    }
    Ok(PerceptualHash(bits))
}

/// Perceptual hash of an interleaved 8-bit RGB buffer.
pub fn phash_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<PerceptualHash, HashError> {
    phash(&GrayImage::from_rgb8(width, height, rgb)?)
}
