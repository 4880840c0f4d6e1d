//! Decoding downloaded bytes into pixels for hashing and embedding.

use std::path::Path;

use thiserror::Error;
use webharvest_core::embed::builtin_embedding;
use webharvest_core::phash::{phash_rgb8, PerceptualHash};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("payload is not a recognised image format")]
    NonImage,
    #[error("image could not be decoded: {0}")]
    Decode(String),
    #[error("image has no pixels")]
    Empty,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Interleaved 8-bit RGB pixels.
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Sniffs the format from magic bytes, then fully decodes.
pub fn decode(bytes: &[u8]) -> Result<(Rgb, image::ImageFormat), ImageError> {
    let format = image::guess_format(bytes).map_err(|_| ImageError::NonImage)?;
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImageError::Decode(e.to_string()))?
        .to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(ImageError::Empty);
    }
    Ok((
        Rgb {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        },
        format,
    ))
}

pub fn decode_file(path: &Path) -> Result<Rgb, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map(|(rgb, _)| rgb)
}

impl Rgb {
    pub fn phash(&self) -> PerceptualHash {
        phash_rgb8(self.width, self.height, &self.pixels).expect("decoded image has pixels")
    }

    pub fn embed(&self) -> Vec<f64> {
        builtin_embedding(self.width, self.height, &self.pixels).expect("decoded image has pixels")
    }
}

/// File extension used in the content store.
pub fn extension(format: image::ImageFormat) -> &'static str {
    format.extensions_str().first().copied().unwrap_or("img")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn html_is_not_an_image() {
        assert!(matches!(
            decode(b"<!doctype html><html></html>"),
            Err(ImageError::NonImage)
        ));
    }

    #[test]
    fn truncated_png_fails_decoding() {
        let mut png = Vec::new();
        image::RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]))
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .unwrap();
        png.truncate(png.len() / 2);
        assert!(matches!(decode(&png), Err(ImageError::Decode(_))));
    }
}
