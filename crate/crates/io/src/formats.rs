use std::io::Cursor;

use image::ImageReader;
use serde::Serialize;
use sms_core::{Field, LabelMap, ScalarField};

use crate::artifacts::quantize;
use crate::error::{IoError, Result};

/// Label colors; label `l` uses entry `(l - 1) % 12`.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn palette(label: u32) -> [u8; 3] {
    PALETTE[(label as usize + PALETTE.len() - 1) % PALETTE.len()]
}

#[derive(Serialize)]
struct PaletteEntry {
    label: u32,
    rgb: [u8; 3],
    hex: String,
}

/// `[{"label":1,"rgb":[..],"hex":"#.."}, ...]` for labels `1..=k`.
pub fn palette_json(k: usize) -> String {
    let entries: Vec<PaletteEntry> = (1..=k as u32)
        .map(|label| {
            let rgb = palette(label);
            PaletteEntry {
                label,
                rgb,
                hex: format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2]),
            }
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("palette serializes")
}

/// Binary PGM (P5) of `round(255 p)`.
pub fn encode_pgm(field: &Field) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", field.width(), field.height()).into_bytes();
    out.extend(field.values().iter().map(|&v| quantize(v)));
    out
}

/// 8-bit gray PNG of `round(255 p)`.
pub fn encode_gray_png(field: &Field) -> Result<Vec<u8>> {
    let data: Vec<u8> = field.values().iter().map(|&v| quantize(v)).collect();
    encode_png(
        field.width(),
        field.height(),
        png::ColorType::Grayscale,
        None,
        &data,
    )
}

/// Indexed PNG whose pixel index is `label - 1`. The palette has one entry
/// per label so indices stay distinct even where colors wrap.
pub fn encode_labels_png(labels: &LabelMap, k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > 256 {
        return Err(IoError::Encode(format!(
            "indexed labels need 1..=256 classes, got {k}"
        )));
    }
    let table: Vec<u8> = (1..=k as u32).flat_map(palette).collect();
    let data: Vec<u8> = labels.labels().iter().map(|&l| (l - 1) as u8).collect();
    encode_png(
        labels.width(),
        labels.height(),
        png::ColorType::Indexed,
        Some(table),
        &data,
    )
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| IoError::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| IoError::Encode(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit gray PGM or PNG into `(width, height, samples)`.
pub fn decode_gray8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| IoError::Decode(e.to_string()))?
        .decode()
        .map_err(|e| IoError::Decode(e.to_string()))?;
    let gray = img.to_luma8();
    Ok((
        gray.width() as usize,
        gray.height() as usize,
        gray.into_raw(),
    ))
}

const RAW_MAGIC: &[u8; 4] = b"SOFP";

/// One channel of a raw ownership (or pattern) file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannel {
    pub channel: u32,
    pub field: ScalarField<f32>,
}

pub fn write_raw(field: &Field, channel: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(field.width() as u32).to_le_bytes());
    out.extend_from_slice(&(field.height() as u32).to_le_bytes());
    out.extend_from_slice(&channel.to_le_bytes());
    for &v in field.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<RawChannel> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(IoError::Raw("missing SOFP header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (w, h, channel) = (word(4) as usize, word(8) as usize, word(12));
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IoError::Raw("dimensions overflow".into()))?;
    if bytes.len() - 16 != expected {
        return Err(IoError::Raw(format!(
            "{w}x{h} needs {expected} payload bytes, found {}",
            bytes.len() - 16
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawChannel {
        channel,
        field: ScalarField::new(w, h, values)?,
    })
}
