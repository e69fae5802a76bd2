//! Paired-image annotation files and the bundled synthetic set.
//!
//! An annotation file is a JSON array of
//! `{"rgb": path, "ir": path, "boxes": [{"cls", "cx", "cy", "w", "h"}]}` with
//! normalized box coordinates. Relative paths resolve against the file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::GroundTruth;
use crate::pipeline::image::{encode_pgm, encode_ppm, load_pair};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub rgb: PathBuf,
    pub ir: PathBuf,
    pub boxes: Vec<GroundTruth>,
}

/// A loaded pair with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub rgb: Tensor,
    pub ir: Tensor,
    pub boxes: Vec<GroundTruth>,
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<Entry> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} has no samples", path.display())));
    }
    Ok(entries)
}

pub fn load_dataset(path: &Path, classes: usize) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_entries(path)?
        .into_iter()
        .map(|e| {
            for b in &e.boxes {
                b.validate(classes)?;
            }
            let (rgb, ir) = load_pair(&base.join(&e.rgb), &base.join(&e.ir))?;
            Ok(Sample {
                rgb,
                ir,
                boxes: e.boxes,
            })
        })
        .collect()
}

pub const SYNTHETIC_EXTENT: usize = 64;

/// Box layout of the synthetic set: class 0 objects are hot and red, class 1
/// objects are warm and green.
fn synthetic_boxes() -> [Vec<GroundTruth>; 4] {
    let gt = |cls, cx, cy, w, h| GroundTruth { cls, cx, cy, w, h };
    [
        vec![gt(0, 0.3125, 0.375, 0.25, 0.25)],
        vec![
            gt(1, 0.625, 0.5, 0.375, 0.25),
            gt(0, 0.25, 0.8125, 0.1875, 0.125),
        ],
        vec![gt(0, 0.75, 0.25, 0.1875, 0.3125)],
        vec![
            gt(1, 0.375, 0.625, 0.25, 0.375),
            gt(1, 0.8125, 0.8125, 0.125, 0.125),
        ],
    ]
}

/// Renders one synthetic pair as `(rgb bytes, ir bytes)` in raw raster form.
fn render(index: usize, boxes: &[GroundTruth]) -> (Vec<u8>, Vec<u8>) {
    let n = SYNTHETIC_EXTENT;
    let mut rgb = vec![0u8; n * n * 3];
    let mut ir = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            rgb[3 * p] = (40 + (x * 2) % 60) as u8;
            rgb[3 * p + 1] = (50 + (y + 7 * index) % 50) as u8;
            rgb[3 * p + 2] = (90 + ((x + y) / 2) % 40) as u8;
            ir[p] = (20 + ((x * 3 + y * 5 + index * 11) % 17)) as u8;
        }
    }
    for b in boxes {
        let to_px = |c: f64, s: f64| {
            let lo = ((c - s / 2.0) * n as f64).round() as usize;
            let hi = ((c + s / 2.0) * n as f64).round() as usize;
            (lo, hi.min(n))
        };
        let (x0, x1) = to_px(b.cx, b.w);
        let (y0, y1) = to_px(b.cy, b.h);
        let (color, heat) = if b.cls == 0 {
            ([220, 40, 30], 235)
        } else {
            ([40, 200, 60], 160)
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * n + x;
                rgb[3 * p..3 * p + 3].copy_from_slice(&color);
                ir[p] = heat;
            }
        }
    }
    (rgb, ir)
}

/// Writes the four synthetic pairs and `dataset.json` into `dir`.
pub fn write_synthetic(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = SYNTHETIC_EXTENT;
    let mut entries = Vec::new();
    for (i, boxes) in synthetic_boxes().into_iter().enumerate() {
        let (rgb, ir) = render(i, &boxes);
        let rgb_name = format!("pair{i}_rgb.ppm");
        let ir_name = format!("pair{i}_ir.pgm");
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(&rgb_name, encode_ppm(n, n, &rgb))?;
        write(&ir_name, encode_pgm(n, n, &ir))?;
        entries.push(Entry {
            rgb: rgb_name.into(),
            ir: ir_name.into(),
            boxes,
        });
    }
    let path = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Location of the synthetic set shipped with the crate.
pub fn bundled_dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy/dataset.json")
}
