use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Baseline JPEG encode at `quality` followed by decode.
pub fn jpeg_roundtrip(image: &RgbImage, quality: u8) -> Result<RgbImage> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(image)
        .map_err(|e| Error::Codec(e.to_string()))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg).map_err(|e| Error::Codec(e.to_string()))?;
    Ok(decoded.to_rgb8())
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.as_raw().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}
