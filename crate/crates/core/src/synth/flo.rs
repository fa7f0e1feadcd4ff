//! Middlebury `.flo` files: `"PIEH"` (the float 202021.25), `i32` width,
//! `i32` height, then row-major interleaved `(u, v)` as little-endian `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: f32 = 202021.25;
const HEADER: usize = 12;

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Serialises a `2×h×w` field. Values are rounded to `f32`.
pub fn encode_flo(flow: &Tensor) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(crate::error::shape_err("encode_flo", s, &[2]));
    }
    let (h, w) = (s[1], s[2]);
    let dim = |v: usize| i32::try_from(v).map_err(|_| Error::Config(format!("extent {v} too large for .flo")));
    let mut out = Vec::with_capacity(HEADER + 8 * h * w);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    let (u, v) = flow.data().split_at(h * w);
    for (a, b) in u.iter().zip(v) {
        out.extend_from_slice(&(*a as f32).to_le_bytes());
        out.extend_from_slice(&(*b as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| b.try_into().unwrap())
            .ok_or_else(|| format_err(at, "truncated header"))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic}")));
    }
    let extent = |at: usize| -> Result<usize> {
        let v = i32::from_le_bytes(word(at)?);
        usize::try_from(v).map_err(|_| format_err(at, format!("negative extent {v}")))
    };
    let (w, h) = (extent(4)?, extent(8)?);
    let n = h * w;
    let expected = HEADER + 8 * n;
    if bytes.len() < expected {
        return Err(format_err(bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes"));
    }
    let mut data = vec![0.0; 2 * n];
    for (i, pair) in bytes[HEADER..].chunks_exact(8).enumerate() {
        data[i] = f64::from(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        data[n + i] = f64::from(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    Tensor::new(&[2, h, w], data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor) -> Result<()> {
    std::fs::write(path, encode_flo(flow)?)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_flo(&std::fs::read(path)?)
}
