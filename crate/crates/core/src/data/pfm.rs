//! Grayscale PFM (`Pf`) disparity files: text header, little-endian `f32`
//! body, rows stored bottom to top. Invalid pixels are written as `+inf` and
//! read back as invalid.

use std::path::Path;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_pfm(d: &DisparityMap) -> Result<Vec<u8>> {
    let (h, w) = (d.height(), d.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if d.valid[i] { d.values.data()[i] } else { f64::INFINITY };
            if d.valid[i] && !v.is_finite() {
                return Err(Error::Pfm(format!("non-finite value at ({y}, {x})")));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off one whitespace-terminated header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return Err(Error::Pfm("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Pfm("header is not ASCII".into()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(Error::Pfm("colour PFM (PF) is not supported, only grayscale Pf".into())),
        other => return Err(Error::Pfm(format!("bad magic {other:?}"))),
    }
    let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let w = dim(token(bytes, &mut pos)?).ok_or_else(|| Error::Pfm("bad width".into()))?;
    let h = dim(token(bytes, &mut pos)?).ok_or_else(|| Error::Pfm("bad height".into()))?;
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Pfm("bad scale".into()))?;
    if !(scale < 0.0) {
        return Err(Error::Pfm(format!("scale {scale} is not little-endian (negative)")));
    }
    // Exactly one whitespace byte separates the header from the body.
    let body = &bytes[pos + 1..];
    if body.len() != 4 * w * h {
        return Err(Error::Pfm(format!("body has {} bytes, expected {}", body.len(), 4 * w * h)));
    }
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (j, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
        if v.is_nan() {
            return Err(Error::Pfm("NaN in body".into()));
        }
        let (row, x) = (h - 1 - j / w, j % w);
        values[row * w + x] = v;
        valid[row * w + x] = v.is_finite();
    }
    DisparityMap::new(Tensor::new([h, w], values)?, valid)
}

pub fn write_pfm(d: &DisparityMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pfm(d)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    decode_pfm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
