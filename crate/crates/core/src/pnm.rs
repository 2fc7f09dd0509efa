//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::patchify::Image;

/// Quantizes `[0,1]` values to bytes (clamped, rounded to nearest).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

/// Raw bytes straight to a P5/P6 file.
pub fn encode_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Vec<u8> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn write(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("netpbm header", "unexpected end of header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::format("netpbm header", format!("{field} is not a number: {tok:?}")))
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("netpbm header", format!("magic {other:?} is not P5 or P6"))),
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("netpbm header", format!("maxval {maxval} unsupported (1..=255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("netpbm header", "missing separator before raster"));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("netpbm raster", "dimensions overflow"))?;
    let actual = bytes.len() - pos;
    if actual < expected {
        return Err(Error::format(
            "netpbm raster",
            format!("truncated: expected {expected} bytes, found {actual}"),
        ));
    }
    if actual > expected {
        return Err(Error::format(
            "netpbm raster",
            format!("{} trailing bytes after {expected}-byte raster", actual - expected),
        ));
    }
    let scale = maxval as f32;
    let pixels = bytes[pos..].iter().map(|&b| b as f32 / scale).collect();
    Image::new(height, width, channels, pixels)
}
