use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageReader};
use sms_core::{GrayImage, ScalarField, Stack};

use crate::error::{IoError, Result};

/// Width and height from the header alone, without decoding pixels.
pub fn peek_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    if reader.format().is_none() {
        return Err(IoError::Decode("unrecognized image format".into()));
    }
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    Ok((w as usize, h as usize))
}

/// Decodes PGM/PPM/PNG bytes into bands normalized to `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.is_empty() {
        return Err(IoError::Decode("empty input".into()));
    }
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| IoError::Decode(e.to_string()))?
        .decode()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    Ok(to_bands(&img))
}

pub fn load_image(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

fn to_bands(img: &DynamicImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
    let scale = if wide { 65535.0 } else { 255.0 };
    let bands: Vec<Vec<f64>> = match (img.color().has_color(), wide) {
        (true, true) => split(img.to_rgb16().as_raw(), 3),
        (true, false) => split(img.to_rgb8().as_raw(), 3),
        (false, true) => split(img.to_luma16().as_raw(), 1),
        (false, false) => split(img.to_luma8().as_raw(), 1),
    };
    let fields = bands
        .into_iter()
        .map(|b| {
            let values = b.into_iter().map(|v| v / scale).collect();
            ScalarField::new(w, h, values).expect("decoded buffer matches its size")
        })
        .collect();
    Stack::new(fields).expect("bands share the image size")
}

fn split<S: Copy + Into<f64>>(raw: &[S], bands: usize) -> Vec<Vec<f64>> {
    (0..bands)
        .map(|b| raw.iter().skip(b).step_by(bands).map(|&v| v.into()).collect())
        .collect()
}
