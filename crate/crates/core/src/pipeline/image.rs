//! Binary PGM (P5) / PPM (P6) ingestion and heatmap export.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded netpbm raster scaled to `[0, 1]`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn header_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::ImageHeader {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(header_err(path, format!("missing {what}")));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    let t = token(bytes, pos, path, what)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| header_err(path, format!("{what} is not a number")))
}

pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos, path, "magic")? {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(header_err(
                path,
                format!("unsupported magic `{}`", String::from_utf8_lossy(m)),
            ))
        }
    };
    let width = number(bytes, &mut pos, path, "width")?;
    let height = number(bytes, &mut pos, path, "height")?;
    let maxval = number(bytes, &mut pos, path, "maxval")?;
    if width == 0 || height == 0 {
        return Err(header_err(path, "zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(header_err(path, format!("maxval {maxval} out of range")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(header_err(path, "missing separator before raster"));
    }
    pos += 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < count * depth {
        return Err(header_err(
            path,
            format!(
                "raster has {} bytes, expected {}",
                raster.len(),
                count * depth
            ),
        ));
    }
    let plane = width * height;
    let mut data = vec![0.0; count];
    for i in 0..count {
        let v = if depth == 1 {
            raster[i] as usize
        } else {
            (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
        };
        let (px, ch) = (i / channels, i % channels);
        data[ch * plane + px] = v as f64 / maxval as f64;
    }
    Ok(Raster {
        channels,
        height,
        width,
        data,
    })
}

pub fn read_netpbm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}

/// `[1, 3, H, W]`, grayscale replicated across the three channels.
pub fn raster_to_tensor(r: &Raster) -> Tensor {
    let plane = r.height * r.width;
    Tensor::from_fn(&[1, 3, r.height, r.width], |i| {
        let (ch, px) = (i / plane, i % plane);
        let src = if r.channels == 1 { 0 } else { ch };
        r.data[src * plane + px]
    })
}

/// Loads a registered RGB / IR pair as two `[1, 3, H, W]` tensors.
pub fn load_pair(rgb_path: &Path, ir_path: &Path) -> Result<(Tensor, Tensor)> {
    let rgb = read_netpbm(rgb_path)?;
    let ir = read_netpbm(ir_path)?;
    if (rgb.height, rgb.width) != (ir.height, ir.width) {
        return Err(Error::Pairing(format!(
            "RGB is {}x{} but IR is {}x{}",
            rgb.height, rgb.width, ir.height, ir.width
        )));
    }
    if rgb.height % INPUT_MULTIPLE != 0 || rgb.width % INPUT_MULTIPLE != 0 {
        return Err(Error::Extent {
            height: rgb.height,
            width: rgb.width,
        });
    }
    Ok((raster_to_tensor(&rgb), raster_to_tensor(&ir)))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Channel mean of the first sample, min-max scaled to `0..=255`. A constant
/// map becomes all zeros.
pub fn heatmap_pixels(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let [_, c, h, w] = t.dims4("export_heatmap")?;
    let plane = h * w;
    let mean: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| t.data()[ch * plane + p]).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        mean.iter()
            .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![0; plane]
    };
    Ok((w, h, pixels))
}

pub fn export_heatmap(t: &Tensor, path: &Path) -> Result<()> {
    let (w, h, px) = heatmap_pixels(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(w, h, &px))
        .map_err(|e| Error::io(path, e))
}
