//! Binary netpbm I/O: PGM (`P5`) for `[H, W]` fields and PPM (`P6`) for
//! `[H, W, 3]` fields, 8-bit only. Values map to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::SignalField;

fn format_error(msg: impl Into<String>) -> Error {
    Error::ImageFormat(msg.into())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_error("expected a binary PGM (P5) or PPM (P6) header")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_error("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_error("malformed header: expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_error("malformed header: number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_error(format!("unsupported maxval {maxval}; only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(format_error("image has zero size"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_error("malformed header: missing separator before pixel data")),
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

pub fn decode(bytes: &[u8]) -> Result<SignalField> {
    let h = parse_header(bytes)?;
    let len = h.width * h.height * h.channels;
    let payload = &bytes[h.data_start..];
    if payload.len() < len {
        return Err(format_error(format!(
            "truncated payload: expected {len} bytes, found {}",
            payload.len()
        )));
    }
    let data = payload[..len].iter().map(|&b| b as f64 / 255.0).collect();
    let shape = if h.channels == 1 {
        vec![h.height, h.width]
    } else {
        vec![h.height, h.width, h.channels]
    };
    SignalField::new(data, shape)
}

pub fn encode(field: &SignalField) -> Result<Vec<u8>> {
    let (magic, h, w) = match *field.shape() {
        [h, w] => ("P5", h, w),
        [h, w, 3] => ("P6", h, w),
        _ => {
            return Err(format_error(format!(
                "only [H, W] and [H, W, 3] fields can be written as images, got {:?}",
                field.shape()
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(field.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<SignalField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_image(path: &Path, field: &SignalField) -> Result<()> {
    let bytes = encode(field)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a PGM mask: nonzero pixels are observed.
pub fn read_mask(path: &Path) -> Result<(Vec<usize>, Vec<bool>)> {
    let field = read_image(path)?;
    if field.shape().len() != 2 {
        return Err(format_error("mask must be a grayscale PGM"));
    }
    let keep = field.data().iter().map(|&v| v > 0.0).collect();
    Ok((field.shape().to_vec(), keep))
}
