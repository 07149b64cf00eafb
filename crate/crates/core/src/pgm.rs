//! Binary 8-bit PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps `[0, 1]` values to bytes as `round(255·p)`.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

pub fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_gray(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_gray(width, height, pixels))?;
    Ok(())
}

fn fail<T>(offset: usize, message: &str) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

/// Parses a P5 image with maxval 255, returning `(width, height, pixels)`.
pub fn decode_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if !bytes.starts_with(b"P5") {
        return fail(0, "not a binary PGM (missing P5 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return fail(pos, "truncated PGM header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                message: "expected an integer in PGM header".into(),
            })?;
    }
    if fields[2] != 255 {
        return fail(pos, "only maxval 255 is supported");
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return fail(pos, "missing whitespace after PGM header");
    }
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let data = &bytes[pos..];
    if data.len() < w * h {
        return fail(bytes.len(), "truncated PGM pixel data");
    }
    Ok((w, h, data[..w * h].to_vec()))
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    decode_gray(&fs::read(path)?)
}

/// Reads a 0/255 mask as a binary `{0, 1}` grid.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, px) = read_gray(path)?;
    if let Some(v) = px.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::InvalidArgument(format!(
            "mask PGM must contain only 0 and 255, found {v}"
        )));
    }
    Ok((w, h, px.into_iter().map(|v| u8::from(v == 255)).collect()))
}
