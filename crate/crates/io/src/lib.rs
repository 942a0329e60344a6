//! File formats of the segmentation tools.
//!
//! * input images: PGM (P2/P5), PPM (P3/P6) and PNG, normalized to `[0, 1]`;
//!   gray images have one band, color images three
//! * `own_<i>.pgm`: 8-bit ownership maps, `round(255 p_i)`
//! * `own_<i>.sofp`: raw little-endian `f32` ownerships behind a 16-byte
//!   header (`SOFP`, width, height, channel index as `u32`)
//! * `labels.png`: indexed PNG over a fixed 12-color palette
//! * `trace.csv`, `summary.json`
//!
//! Everything that decides bytes of an artifact lives here so the CLI and
//! the service emit identical files.

mod artifacts;
mod error;
mod formats;
mod images;

pub use artifacts::{
    emit_artifacts, emitted_energy, labels_from_ownerships, quantize, Artifacts, EmitOptions,
    RunRequest, Summary, ROUNDED_TOL,
};
pub use error::{IoError, Result};
pub use formats::{
    decode_gray8, encode_gray_png, encode_labels_png, encode_pgm, palette, palette_json,
    read_raw, write_raw, RawChannel, PALETTE,
};
pub use images::{decode_image, load_image, peek_dimensions};
