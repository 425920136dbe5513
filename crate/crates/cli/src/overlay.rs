//! Plain-text PGM overlays of a segmentation on the FLAIR channel.
//!
//! Anatomy occupies gray levels 0..=127. Labels are painted with fixed codes
//! standing in for the usual colors: edema (green) 170, necrotic/non-enhancing
//! core (blue) 212, enhancing tumor (red) 255.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use mtau_core::pipeline::{normalize_volume, SegVolume, VolumeScan};

pub const ANATOMY_MAX: u8 = 127;
pub const EDEMA_GRAY: u8 = 170;
pub const NCR_NET_GRAY: u8 = 212;
pub const ENHANCING_GRAY: u8 = 255;

pub fn label_gray(label: u8) -> Option<u8> {
    match label {
        1 => Some(NCR_NET_GRAY),
        2 => Some(EDEMA_GRAY),
        4 => Some(ENHANCING_GRAY),
        _ => None,
    }
}

/// One `P2` image; `flair` is normalized to `[0, 1]`.
pub fn slice_pgm(flair: &[f32], labels: &[u8], height: usize, width: usize) -> String {
    let mut out = format!("P2\n{width} {height}\n255\n");
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| {
                let i = y * width + x;
                let gray = label_gray(labels[i])
                    .unwrap_or_else(|| (flair[i].clamp(0.0, 1.0) * f32::from(ANATOMY_MAX)).round() as u8);
                gray.to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Writes `slice_000.pgm ..` for every axial slice into `dir`.
pub fn write_overlays(dir: &Path, scan: &VolumeScan, seg: &SegVolume) -> Result<usize> {
    ensure!(scan.shape == seg.shape, "scan {} and segmentation differ in extent", scan.id);
    let normalized = normalize_volume(scan)?;
    let [depth, height, width] = scan.shape;
    let plane = height * width;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let flair = normalized.modality(0);
    for z in 0..depth {
        let image = slice_pgm(&flair[z * plane..(z + 1) * plane], seg.slice(z), height, width);
        let path = dir.join(format!("slice_{z:03}.pgm"));
        fs::write(&path, image).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(depth)
}
