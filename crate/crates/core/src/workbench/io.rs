//! Binary PPM (P6) images and PGM (P5) label maps.

use std::fs;
use std::path::Path;

use crate::encoders::ImageRGB;
use crate::error::{ClaspError, Result};
use crate::pseudo_labels::PartLabelMap;

fn format_err(path: &Path, reason: impl Into<String>) -> ClaspError {
    ClaspError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits a netpbm header into `(magic, width, height, maxval, payload offset)`.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    i += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s:?}")));
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, i))
}

pub fn encode_ppm(image: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            for v in image.pixel(y, x) {
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn write_ppm(path: &Path, image: &ImageRGB) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageRGB> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, off) = parse_header(&bytes, path)?;
    if magic != "P6" || maxval != 255 {
        return Err(format_err(path, format!("expected 8-bit P6, got {magic} maxval {maxval}")));
    }
    if bytes.len() < off + 3 * w * h {
        return Err(format_err(path, "truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = f64::from(bytes[off + (y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageRGB::new(id, h, w, data)
}

pub fn encode_pgm(map: &PartLabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(map.labels());
    out
}

pub fn write_pgm(path: &Path, map: &PartLabelMap) -> Result<()> {
    fs::write(path, encode_pgm(map))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<PartLabelMap> {
    let bytes = fs::read(path)?;
    let (magic, w, h, maxval, off) = parse_header(&bytes, path)?;
    if magic != "P5" || maxval > 255 {
        return Err(format_err(path, format!("expected 8-bit P5, got {magic} maxval {maxval}")));
    }
    if bytes.len() < off + w * h {
        return Err(format_err(path, "truncated label data"));
    }
    PartLabelMap::new(h, w, bytes[off..off + w * h].to_vec())
}
