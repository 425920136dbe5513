//! On-disk volume container.
//!
//! A volume `<name>` is a JSON header `<name>.vol.json`
//! (`{"shape":[D,H,W],"dtype":..,"modalities":[..],"spacing":[sx,sy,sz]}`)
//! next to a raw body `<name>.vol.raw` holding the channels concatenated in
//! header order, each row-major. Scans use dtype `f32le` with the four
//! modalities; label volumes use dtype `u8` with the single channel `seg`.
//! A cohort directory also carries `manifest.json` listing its case ids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{SegVolume, VolumeScan, MODALITIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub dtype: String,
    pub modalities: Vec<String>,
    pub spacing: [f64; 3],
}

pub const SEG_SUFFIX: &str = "_seg";

fn header_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.vol.json"))
}

fn raw_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.vol.raw"))
}

fn write_volume(dir: &Path, name: &str, header: &VolumeHeader, body: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = raw_path(dir, name);
    fs::write(&raw, body).map_err(|e| Error::io(&raw, e))?;
    let path = header_path(dir, name);
    let text = serde_json::to_string(header).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_volume(header_file: &Path, dtype: &str, channels: &[&str]) -> Result<(VolumeHeader, Vec<u8>, String)> {
    let text = fs::read_to_string(header_file).map_err(|e| Error::io(header_file, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(header_file, e))?;
    let ctx = header_file.display().to_string();
    if header.dtype != dtype {
        return Err(Error::data(&ctx, format!("dtype {:?}, expected {dtype:?}", header.dtype)));
    }
    if header.modalities != channels {
        return Err(Error::data(&ctx, format!("channels {:?}, expected {channels:?}", header.modalities)));
    }
    let file_name = header_file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let name = file_name
        .strip_suffix(".vol.json")
        .ok_or_else(|| Error::data(&ctx, "header file name must end in .vol.json"))?
        .to_string();
    let dir = header_file.parent().unwrap_or_else(|| Path::new("."));
    let raw = raw_path(dir, &name);
    let body = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let width = if dtype == "u8" { 1 } else { 4 };
    let expected = header.shape.iter().product::<usize>() * channels.len() * width;
    if body.len() != expected {
        return Err(Error::data(raw.display().to_string(), format!("{} bytes, expected {expected}", body.len())));
    }
    Ok((header, body, name))
}

pub fn write_scan(dir: &Path, scan: &VolumeScan) -> Result<PathBuf> {
    let header = VolumeHeader {
        shape: scan.shape,
        dtype: "f32le".into(),
        modalities: MODALITIES.iter().map(|m| m.to_string()).collect(),
        spacing: scan.spacing,
    };
    let body: Vec<u8> = scan.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_volume(dir, &scan.id, &header, &body)
}

pub fn read_scan(header_file: &Path) -> Result<VolumeScan> {
    let (header, body, name) = read_volume(header_file, "f32le", &MODALITIES)?;
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    VolumeScan::new(name, header.shape, data, header.spacing)
}

/// Writes `<id>_seg.vol.{json,raw}`.
pub fn write_seg(dir: &Path, seg: &SegVolume) -> Result<PathBuf> {
    let header = VolumeHeader {
        shape: seg.shape,
        dtype: "u8".into(),
        modalities: vec!["seg".into()],
        spacing: seg.spacing(),
    };
    write_volume(dir, &format!("{}{SEG_SUFFIX}", seg.id), &header, seg.labels())
}

/// Reads a label volume; its id is the file stem without the `_seg` suffix.
pub fn read_seg(header_file: &Path) -> Result<SegVolume> {
    let (header, body, name) = read_volume(header_file, "u8", &["seg"])?;
    let id = name.strip_suffix(SEG_SUFFIX).unwrap_or(&name).to_string();
    SegVolume::new(id, header.shape, body, header.spacing)
        .map_err(|e| Error::data(header_file.display().to_string(), e.to_string()))
}

pub fn scan_path(dir: &Path, id: &str) -> PathBuf {
    header_path(dir, id)
}

pub fn seg_path(dir: &Path, id: &str) -> PathBuf {
    header_path(dir, &format!("{id}{SEG_SUFFIX}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_cohort(dir: &Path, pairs: &[(VolumeScan, SegVolume)], seed: Option<u64>) -> Result<()> {
    for (scan, seg) in pairs {
        write_scan(dir, scan)?;
        write_seg(dir, seg)?;
    }
    let manifest = CohortManifest { cases: pairs.iter().map(|(s, _)| s.id.clone()).collect(), seed };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Loads the listed cases (all manifest cases when `ids` is `None`).
pub fn read_cohort(dir: &Path, ids: Option<&[String]>) -> Result<Vec<(VolumeScan, SegVolume)>> {
    let manifest;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            manifest = read_manifest(dir)?;
            &manifest.cases
        }
    };
    ids.iter()
        .map(|id| Ok((read_scan(&scan_path(dir, id))?, read_seg(&seg_path(dir, id))?)))
        .collect()
}

/// Label volumes in `dir`, keyed by case id, sorted by id.
pub fn list_segs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_suffix(&format!("{SEG_SUFFIX}.vol.json")) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}
