//! Grayscale image I/O: binary PGM (P5, maxval up to 255) and PFM.
//!
//! Images load as `[C, H, W]` tensors with raw sample values (0..255 for
//! PGM). PFM stores rows bottom-to-top with a sign-of-scale endianness flag;
//! only little-endian data (negative scale) is accepted.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(msg: impl Into<String>) -> Error {
    Error::format("image", msg)
}

/// Pulls the next whitespace-delimited token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad header token {:?}", String::from_utf8_lossy(tok))))
}

/// Reads a binary PGM into a `[1, H, W]` tensor of 0..=maxval values.
pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P5" {
        return Err(bad("not a P5 PGM"));
    }
    let w = parse_usize(next_token(bytes, &mut pos)?)?;
    let h = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(bad(format!(
            "expected {need} pixel bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..].iter().map(|&b| b as f32).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Writes a `[1, H, W]` tensor as binary PGM, clamping and rounding samples
/// to 0..=255.
pub fn write_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.len() != 3 || dims[0] != 1 {
        return Err(Error::shape(format!(
            "PGM writer needs [1, H, W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Reads a PFM (grayscale `Pf` or color `PF`) into `[1, H, W]` or
/// `[3, H, W]`.
pub fn read_pfm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)? {
        b"Pf" => 1,
        b"PF" => 3,
        _ => return Err(bad("not a PFM")),
    };
    let w = parse_usize(next_token(bytes, &mut pos)?)?;
    let h = parse_usize(next_token(bytes, &mut pos)?)?;
    let scale_tok = next_token(bytes, &mut pos)?;
    let scale: f32 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported"));
    }
    pos += 1;
    let need = h * w * channels * 4;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(bad(format!(
            "expected {need} payload bytes, found {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raw: Vec<f32> = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    // PFM rows run bottom-to-top, samples interleaved per pixel.
    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        let src_row = h - 1 - y;
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] = raw[(src_row * w + x) * channels + c];
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Writes a `[1, H, W]` tensor as grayscale little-endian PFM.
pub fn write_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.len() != 3 || dims[0] != 1 {
        return Err(Error::shape(format!(
            "PFM writer needs [1, H, W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&t.get(&[0, y, x]).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(&bytes),
        Some("pfm") => read_pfm(&bytes),
        Some("esgt") => Tensor::read_from(&mut bytes.as_slice()),
        other => Err(bad(format!("unsupported image extension {other:?}"))),
    }
}
