//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Encodes a `[c×H×W]` image with `c` = 3 (P6) or 1 (P5).
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return shape_err("encode_pnm", s, "[1|3, H, W]");
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Decodes P5/P6 (maxval 255) into `[1×H×W]` or `[3×H×W]` in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PNM header".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(Error::Format("PNM header not terminated".into()));
    }
    pos += 1;
    let c = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported PNM magic {m:?}"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PNM {what}: {s:?}")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    let plane = w.checked_mul(h).ok_or_else(|| Error::Format("PNM size overflows".into()))?;
    let raster = &bytes[pos..];
    if raster.len() != c * plane {
        return Err(Error::Format(format!("PNM raster has {} bytes, expected {}", raster.len(), c * plane)));
    }
    let mut data = vec![0.0f32; c * plane];
    for (p, px) in raster.chunks_exact(c).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * plane + p] = dequantize(b);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if image.shape().first() != Some(&3) {
        return shape_err("write_ppm", image.shape(), "[3, H, W]");
    }
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

pub fn write_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    if image.shape().first() != Some(&1) {
        return shape_err("write_pgm", image.shape(), "[1, H, W]");
    }
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = decode_pnm(&fs::read(path)?)?;
    if t.dim(0) != 3 {
        return Err(Error::Format("expected a P6 image".into()));
    }
    Ok(t)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = decode_pnm(&fs::read(path)?)?;
    if t.dim(0) != 1 {
        return Err(Error::Format("expected a P5 image".into()));
    }
    Ok(t)
}
