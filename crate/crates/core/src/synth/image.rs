//! Binary PPM/PGM images and flow colour coding.

use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `3×h×w` image in `[0, 1]` as P6 with maxval 255.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err("write_ppm", s, &[3]));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..n {
        buf.extend((0..3).map(|c| to_byte(img.data()[c * n + i])));
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Writes an `h×w` map as P5, scaled so its largest entry is white.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(shape_err("write_pgm", s, &[2]));
    }
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut buf = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    buf.extend(map.data().iter().map(|&v| to_byte(v * scale)));
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a P6 file with maxval 255 into a `3×h×w` tensor.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                msg: "truncated header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    pos += 1;
    if fields[0].1 != "P6" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("expected P6, found {}", fields[0].1),
        });
    }
    let num = |(at, s): &(usize, String)| {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: *at,
            msg: format!("bad number {s:?}"),
        })
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format {
            offset: fields[3].0,
            msg: format!("unsupported maxval {max}"),
        });
    }
    let n = h * w;
    if bytes.len() < pos + 3 * n {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated pixel data, expected {} bytes", pos + 3 * n),
        });
    }
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f64::from(bytes[pos + 3 * i + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Colour-wheel rendering of a `2×h×w` field: hue is the direction,
/// saturation the magnitude relative to the field's largest, so zero flow
/// is white.
pub fn flow_to_color(flow: &Tensor) -> Result<Tensor> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(shape_err("flow_to_color", s, &[2]));
    }
    let n = s[1] * s[2];
    let (u, v) = flow.data().split_at(n);
    let max = u.iter().zip(v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let mag = u[i].hypot(v[i]);
        let sat = if max > 0.0 { mag / max } else { 0.0 };
        let rgb = hsv_to_rgb(v[i].atan2(u[i]).to_degrees(), sat, 1.0);
        for c in 0..3 {
            out[c * n + i] = rgb[c];
        }
    }
    Tensor::new(&[3, s[1], s[2]], out)
}
