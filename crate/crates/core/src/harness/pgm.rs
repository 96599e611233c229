//! Binary PGM (P5, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a single-plane image (`[H, W]` or `[1, 1, H, W]`). Values are
/// clipped to `[0, 1]` and rounded to bytes.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [h, w] | [1, 1, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "pgm",
                format!("expected one plane, got {:?}", image.shape()),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Skips whitespace and `#` comments, then reads one decimal field and its offset.
fn header_field(bytes: &[u8], pos: &mut usize, what: &str) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start, format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map(|v| (v, start))
        .map_err(|_| format_err(start, format!("{what} out of range")))
}

/// Decodes a P5 image into `[1, 1, H, W]` with values `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P5") {
        return Err(format_err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let (w, _) = header_field(bytes, &mut pos, "width")?;
    let (h, _) = header_field(bytes, &mut pos, "height")?;
    let (maxval, maxval_at) = header_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos, "expected whitespace after header"));
    }
    pos += 1;
    let n = w.checked_mul(h).ok_or_else(|| format_err(0, "dimensions overflow"))?;
    if bytes.len() - pos != n {
        return Err(format_err(
            pos,
            format!("expected {n} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, 1, h, w], data)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    match fs::read(path) {
        Ok(b) => decode_pgm(&b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}
