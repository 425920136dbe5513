use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modality order used by every scan and every model input.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];

/// Dataset label of one tumor sub-region; each region gets its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum RegionId {
    /// Necrotic and non-enhancing tumor core.
    NcrNet = 1,
    Edema = 2,
    Enhancing = 4,
}

impl RegionId {
    pub const ALL: [RegionId; 3] = [RegionId::NcrNet, RegionId::Edema, RegionId::Enhancing];

    pub fn label(self) -> u8 {
        self as u8
    }

    /// Position in [`RegionId::ALL`] and in per-sample target arrays.
    pub fn index(self) -> usize {
        match self {
            RegionId::NcrNet => 0,
            RegionId::Edema => 1,
            RegionId::Enhancing => 2,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(RegionId::NcrNet),
            2 => Some(RegionId::Edema),
            4 => Some(RegionId::Enhancing),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionId::NcrNet => "ncr_net",
            RegionId::Edema => "edema",
            RegionId::Enhancing => "enhancing",
        }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// A four-modality scan, `[D, H, W]` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeScan {
    pub id: String,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    /// Modalities concatenated in [`MODALITIES`] order, each row-major.
    pub data: Vec<f32>,
    /// Voxel size along `[x, y, z]`.
    pub spacing: [f64; 3],
}

impl VolumeScan {
    pub fn new(id: impl Into<String>, shape: [usize; 3], data: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        let id = id.into();
        let voxels: usize = shape.iter().product();
        if voxels == 0 {
            return Err(Error::data(&id, format!("scan extents {shape:?} must be positive")));
        }
        if data.len() != 4 * voxels {
            return Err(Error::data(&id, format!("expected {} values for 4 modalities, got {}", 4 * voxels, data.len())));
        }
        check_spacing(&id, spacing)?;
        Ok(Self { id, shape, data, spacing })
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn modality(&self, m: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[m * v..(m + 1) * v]
    }

    pub fn modality_mut(&mut self, m: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.data[m * v..(m + 1) * v]
    }
}

/// Integer label volume with values in `{0, 1, 2, 4}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegVolume {
    pub id: String,
    pub shape: [usize; 3],
    labels: Vec<u8>,
    spacing: [u64; 3],
}

impl SegVolume {
    pub fn new(id: impl Into<String>, shape: [usize; 3], labels: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        let id = id.into();
        let voxels: usize = shape.iter().product();
        if voxels == 0 || labels.len() != voxels {
            return Err(Error::data(&id, format!("{} labels do not fill extents {shape:?}", labels.len())));
        }
        check_spacing(&id, spacing)?;
        if let Some(i) = labels.iter().position(|&l| !matches!(l, 0 | 1 | 2 | 4)) {
            let [_, h, w] = shape;
            return Err(Error::InvalidLabel { value: labels[i], z: i / (h * w), y: (i / w) % h, x: i % w });
        }
        Ok(Self { id, shape, labels, spacing: spacing.map(f64::to_bits) })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing.map(f64::from_bits)
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }
}

fn check_spacing(id: &str, spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::data(id, format!("voxel spacing {spacing:?} must be positive")))
    }
}

/// One axial slice: four normalized input images and the three region masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub volume_id: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    /// `[4, H, W]` in [`MODALITIES`] order.
    pub inputs: Vec<f32>,
    /// `[3, H, W]` binary masks in [`RegionId::ALL`] order.
    pub targets: Vec<u8>,
}

impl SliceSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn target(&self, region: RegionId) -> &[u8] {
        let n = self.pixels();
        &self.targets[region.index() * n..(region.index() + 1) * n]
    }

    pub fn is_all_zero(&self) -> bool {
        self.inputs.iter().all(|&v| v == 0.0) && self.targets.iter().all(|&t| t == 0)
    }
}

/// One binarization threshold per region model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(rename = "1")]
    pub ncr_net: f64,
    #[serde(rename = "2")]
    pub edema: f64,
    #[serde(rename = "4")]
    pub enhancing: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { ncr_net: 0.5, edema: 0.5, enhancing: 0.5 }
    }
}

impl Thresholds {
    pub fn get(&self, region: RegionId) -> f64 {
        match region {
            RegionId::NcrNet => self.ncr_net,
            RegionId::Edema => self.edema,
            RegionId::Enhancing => self.enhancing,
        }
    }

    pub fn set(&mut self, region: RegionId, value: f64) {
        match region {
            RegionId::NcrNet => self.ncr_net = value,
            RegionId::Edema => self.edema = value,
            RegionId::Enhancing => self.enhancing = value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in RegionId::ALL {
            let t = self.get(r);
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("threshold for region {r} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("thresholds: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}
