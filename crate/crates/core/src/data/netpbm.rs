//! Binary NetPBM: P6 for RGB images, P5 for label maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `floor(v·255 + 0.5)`, clamped to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 2],
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    /// Offset of the first raster byte.
    pub data_offset: usize,
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        format: "netpbm",
        offset,
        reason: reason.into(),
    }
}

/// Parse a P5/P6 header, including `#` comments between fields.
pub fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 || buf[0] != b'P' || !(buf[1] == b'5' || buf[1] == b'6') {
        return Err(format_err(0, "magic must be P5 or P6"));
    }
    let mut pos = 2;
    let mut field = |name: &str| -> Result<usize> {
        loop {
            match buf.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(start, format!("expected {name}")));
        }
        std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse::<usize>()
            .map_err(|e| format_err(start, format!("{name}: {e}")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected one whitespace byte after maxval"));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, format!("empty raster {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(pos, format!("maxval {maxval} outside 1..=255")));
    }
    Ok(Header {
        magic: [buf[0], buf[1]],
        width,
        height,
        maxval,
        data_offset: pos + 1,
    })
}

fn raster<'a>(buf: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(2, "raster size overflows"))?;
    let have = buf.len() - h.data_offset;
    if have != need {
        return Err(format_err(
            h.data_offset + have.min(need),
            format!("raster holds {have} bytes, {}x{}x{channels} needs {need}", h.width, h.height),
        ));
    }
    Ok(&buf[h.data_offset..])
}

/// `[3,H,W]` image in `[0,1]` to P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("encode_ppm", format!("expected [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf)?;
    if &h.magic != b"P6" {
        return Err(format_err(0, "expected P6 image"));
    }
    let r = raster(buf, &h, 3)?;
    let n = h.width * h.height;
    let mut t = Tensor::zeros(&[3, h.height, h.width]);
    let scale = h.maxval as f64;
    let d = t.data_mut();
    for i in 0..n {
        for c in 0..3 {
            d[c * n + i] = r[i * 3 + c] as f64 / scale;
        }
    }
    Ok(t)
}

pub fn encode_pgm(width: usize, height: usize, mask: &[u8]) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(Error::shape("encode_pgm", format!("{} bytes for {width}x{height}", mask.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(mask);
    Ok(out)
}

/// Returns `(width, height, raw bytes)`.
pub fn decode_pgm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(buf)?;
    if &h.magic != b"P5" {
        return Err(format_err(0, "expected P5 label map"));
    }
    Ok((h.width, h.height, raster(buf, &h, 1)?.to_vec()))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    std::fs::write(path, encode_pgm(width, height, mask)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&std::fs::read(path)?)
}
