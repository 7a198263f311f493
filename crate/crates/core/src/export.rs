//! Netpbm I/O: attention-map PGM dumps and PGM/PPM image loading.

use std::fs;
use std::path::{Path, PathBuf};

use cmfn_tensor::Tensor;

use crate::error::{CmfnError, FormatError, Result};

/// Binary (P5) grayscale image.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(CmfnError::config(format!(
            "{} pixels for a {height}×{width} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Min–max rescale to `[0, 255]`; a constant row maps to zeros.
pub fn rescale_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// One `attn_<sample>_<pos>.pgm` per row of a `T × (h·w)` attention map.
pub fn dump_attention(dir: impl AsRef<Path>, sample_id: &str, at_m: &Tensor, h: usize, w: usize) -> Result<Vec<PathBuf>> {
    if at_m.rank() != 2 || at_m.cols() != h * w {
        return Err(CmfnError::config(format!(
            "attention map {:?} does not cover a {h}×{w} grid",
            at_m.shape()
        )));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    (0..at_m.rows())
        .map(|t| {
            let path = dir.join(format!("attn_{sample_id}_{t}.pgm"));
            write_pgm(&path, h, w, &rescale_to_bytes(at_m.row(t)))?;
            Ok(path)
        })
        .collect()
}

/// Decoded netpbm raster, always expanded to interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Reads binary PGM (P5) or PPM (P6) with maxval 255.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<RgbImage> {
    parse_pnm(&fs::read(path)?)
}

pub fn parse_pnm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |msg: &str| CmfnError::from(FormatError::Invalid(format!("netpbm: {msg}")));
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token().as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        _ => return Err(FormatError::BadMagic { expected: "P5 or P6" }.into()),
    };
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 || width == 0 || height == 0 {
        return Err(bad("only 8-bit images with positive extents are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = width * height * channels;
    let raster = bytes
        .get(start..start + need)
        .ok_or(FormatError::Truncated { offset: bytes.len() as u64 })?;
    let pixels = if channels == 3 {
        raster.to_vec()
    } else {
        raster.iter().flat_map(|&g| [g; 3]).collect()
    };
    Ok(RgbImage { height, width, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_extremes() {
        assert_eq!(rescale_to_bytes(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(rescale_to_bytes(&[0.3, 0.3]), vec![0, 0]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 2, 3, &[1, 2, 3, 4, 5, 6]).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.height, img.width), (2, 3));
        assert_eq!(&img.pixels[..6], &[1, 1, 1, 2, 2, 2]);
    }
}
