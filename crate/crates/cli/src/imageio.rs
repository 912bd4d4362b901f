//! 8-bit grayscale PNG reading and writing (the lossless on-disk image
//! format for all datasets and exports).

use gazeshift_core::syntheye::GrayImage;
use image::{GrayImage as PngGray, ImageReader, Luma};
use ndarray::Array2;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ImageIoError {
    ImageIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Quantize [0,1] floats to u8 by rounding. The in-memory training path and
/// the PNG round trip share this exact mapping.
pub fn quantize(img: &GrayImage) -> Array2<u8> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn dequantize(img: &Array2<u8>) -> GrayImage {
    img.mapv(|v| v as f32 / 255.0)
}

pub fn write_gray_png(path: &Path, img: &Array2<u8>) -> Result<(), ImageIoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let (h, w) = img.dim();
    let mut png = PngGray::new(w as u32, h as u32);
    for ((y, x), &v) in img.indexed_iter() {
        png.put_pixel(x as u32, y as u32, Luma([v]));
    }
    png.save(path).map_err(|e| ImageIoError::Decode {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_gray_png_f32(path: &Path, img: &GrayImage) -> Result<(), ImageIoError> {
    write_gray_png(path, &quantize(img))
}

pub fn read_gray_png(path: &Path) -> Result<Array2<u8>, ImageIoError> {
    let reader = ImageReader::open(path).map_err(|e| io_err(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| ImageIoError::Decode {
            path: path.display().to_string(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/test.png");
        let img = Array2::from_shape_fn((17, 23), |(y, x)| ((y * 23 + x) % 256) as u8);
        write_gray_png(&path, &img).unwrap();
        let back = read_gray_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn quantization_round_trip_error_is_bounded() {
        let img = Array2::from_shape_fn((8, 8), |(y, x)| (y as f32 * 8.0 + x as f32) / 64.0);
        let q = quantize(&img);
        let back = dequantize(&q);
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
