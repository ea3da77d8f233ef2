//! Binary PGM (P5) images for mask/score-map visualization.
//!
//! Values in [0,1] quantize to `round(255·x)` at maxval 255. The reader
//! exists mainly so tests can round-trip artifacts.

use std::path::Path;

use crate::error::{Error, Result};

/// Encodes a row-major grayscale image; values are clamped to [0,1].
pub fn encode(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Dim(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, encode(width, height, values)?)?;
    Ok(())
}

fn fail(offset: usize, msg: &str) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    }
}

/// Reads one whitespace-delimited header token; returns (start, token).
fn field<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<(usize, &'a str)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(fail(start, &format!("missing {what}")));
    }
    let token = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| fail(start, &format!("{what} is not ASCII")))?;
    Ok((start, token))
}

/// Decodes a P5 image back to (width, height, values in [0,1]).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0usize;
    if field(bytes, &mut pos, "magic")?.1 != "P5" {
        return Err(fail(0, "not a binary PGM (expected magic `P5`)"));
    }
    let (w_at, w_tok) = field(bytes, &mut pos, "width")?;
    let width: usize = w_tok
        .parse()
        .map_err(|_| fail(w_at, "width is not an integer"))?;
    let (h_at, h_tok) = field(bytes, &mut pos, "height")?;
    let height: usize = h_tok
        .parse()
        .map_err(|_| fail(h_at, "height is not an integer"))?;
    let (maxval_at, maxval) = field(bytes, &mut pos, "maxval")?;
    if maxval != "255" {
        return Err(fail(maxval_at, "unsupported maxval (expected 255)"));
    }
    pos += 1; // single whitespace byte separates header from raster
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(fail(bytes.len(), "truncated raster"));
    }
    if bytes.len() > pos + need {
        return Err(fail(pos + need, "trailing bytes after raster"));
    }
    let values = bytes[pos..]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((width, height, values))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode(&std::fs::read(path)?)
}
