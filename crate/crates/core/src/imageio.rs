//! PNG loading and saving for `[c, h, w]` tensors in `[0, 1]`.
//!
//! 8-bit values convert to float by dividing by 255; saving rounds and
//! clamps. Grayscale PNGs load as one channel, everything else as RGB.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Loads a PNG as `[1, h, w]` (grayscale files) or `[3, h, w]` (color).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| CoreError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let data = gray.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Tensor::from_vec(&[1, h, w], data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + i] = raw[3 * i + ch] as f64 / 255.0;
                }
            }
            Tensor::from_vec(&[3, h, w], data)
        }
    })
}

/// Loads an image and converts to the requested channel count (1 or 3),
/// using the standard luma weights for color-to-gray.
pub fn load_image_channels(path: &Path, channels: usize) -> Result<Tensor> {
    let img = load_image(path)?;
    convert_channels(&img, channels)
}

pub fn convert_channels(img: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw();
    match (c, channels) {
        (a, b) if a == b => Ok(img.clone()),
        (3, 1) => {
            let n = h * w;
            let d = img.data();
            let data = (0..n)
                .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
                .collect();
            Ok(Tensor::from_vec(&[1, h, w], data))
        }
        (1, 3) => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Ok(Tensor::from_vec(&[3, h, w], data))
        }
        (got, want) => Err(CoreError::BadShape(format!(
            "cannot convert {got}-channel image to {want} channels"
        ))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Saves a `[1|3, h, w]` tensor as an 8-bit PNG.
pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw();
    match c {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
            let gray = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size matches dimensions");
            gray.save(path).map_err(|e| CoreError::Io(std::io::Error::other(e)))
        }
        3 => {
            let n = h * w;
            let mut buf = vec![0u8; 3 * n];
            for i in 0..n {
                for ch in 0..3 {
                    buf[3 * i + ch] = to_byte(img.data()[ch * n + i]);
                }
            }
            let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer size matches dimensions");
            rgb.save(path).map_err(|e| CoreError::Io(std::io::Error::other(e)))
        }
        other => Err(CoreError::BadShape(format!(
            "can only save 1- or 3-channel images, got {other}"
        ))),
    }
}
