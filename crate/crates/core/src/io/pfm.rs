//! Portable float map (PFM) reader and writer for single-channel depth.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Encodes a `1×1×H×W` map as little-endian grayscale PFM.
pub fn encode(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!("PFM expects a 1×1×H×W map, got {s}")));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    out.reserve(s.numel() * 4);
    for row in (0..s.h).rev() {
        for x in 0..s.w {
            out.extend_from_slice(&(map.at(0, 0, row, x) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes grayscale (`Pf`) or colour (`PF`, channels averaged) PFM of
/// either byte order.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format!("unknown PFM magic `{other}`")),
    };
    let w: usize = token()?.parse().map_err(|_| "bad width")?;
    let h: usize = token()?.parse().map_err(|_| "bad height")?;
    let scale: f64 = token()?.parse().map_err(|_| "bad scale")?;
    // Exactly one whitespace byte separates the header from the data.
    let data = bytes.get(pos + 1..).ok_or("truncated header")?;
    let expected = w * h * channels * 4;
    if data.len() != expected {
        return Err(format!("expected {expected} data bytes, found {}", data.len()));
    }
    let little = scale < 0.0;
    let value = |i: usize| {
        let b: [u8; 4] = data[i * 4..i * 4 + 4].try_into().unwrap();
        (if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }) as f64
    };
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        let base = ((h - 1 - y) * w + x) * channels;
        (0..channels).map(|c| value(base + c)).sum::<f64>() / channels as f64
    }))
}

pub fn write(path: &Path, map: &Tensor) -> Result<()> {
    write_atomic(path, &encode(map)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
