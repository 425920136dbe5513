//! Volume normalization, slicing, filtering, splitting and the inverse
//! operations that rebuild a label volume from per-slice maps.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::{RegionId, SegVolume, SliceSample, VolumeScan};
use crate::error::{Error, Result};

/// Divides each modality by its own maximum. Identically zero modalities are
/// returned unchanged.
pub fn normalize_volume(scan: &VolumeScan) -> Result<VolumeScan> {
    let mut out = scan.clone();
    for (m, name) in super::MODALITIES.iter().enumerate() {
        let values = out.modality_mut(m);
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data(
                format!("{} ({name}, voxel {i})", scan.id),
                format!("intensity {} is negative or non-finite", values[i]),
            ));
        }
        let max = values.iter().fold(0.0f32, |a, &b| a.max(b));
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
    }
    Ok(out)
}

/// Per-region binary masks `[mask_1, mask_2, mask_4]` of a label array.
pub fn labels_to_binary_maps(seg: &SegVolume) -> [Vec<u8>; 3] {
    RegionId::ALL.map(|r| seg.labels().iter().map(|&l| u8::from(l == r.label())).collect())
}

/// One sample per axial index per volume, in input order.
pub fn slice_volumes(pairs: &[(VolumeScan, SegVolume)]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for (scan, seg) in pairs {
        if scan.shape != seg.shape {
            return Err(Error::ExtentMismatch {
                op: "slice_volumes",
                left: scan.shape.to_vec(),
                right: seg.shape.to_vec(),
            });
        }
        let [depth, height, width] = scan.shape;
        let n = height * width;
        let masks = labels_to_binary_maps(seg);
        for z in 0..depth {
            let mut inputs = Vec::with_capacity(4 * n);
            for m in 0..4 {
                inputs.extend_from_slice(&scan.modality(m)[z * n..(z + 1) * n]);
            }
            let mut targets = Vec::with_capacity(3 * n);
            for mask in &masks {
                targets.extend_from_slice(&mask[z * n..(z + 1) * n]);
            }
            out.push(SliceSample { volume_id: scan.id.clone(), slice_index: z, height, width, inputs, targets });
        }
    }
    Ok(out)
}

/// Keeps a sample iff any input pixel or any target pixel is nonzero.
pub fn filter_zero_slices(samples: Vec<SliceSample>) -> Vec<SliceSample> {
    samples.into_iter().filter(|s| !s.is_all_zero()).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

/// Volume ids assigned to train, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct VolumeSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded partition of volume ids by `fractions` (train, val, test).
///
/// Split sizes are the largest-remainder rounding of `n * fraction`, with at
/// least one volume in every split whose fraction is positive.
pub fn split_volume_ids(ids: &[String], seed: u64, fractions: [f64; 3]) -> Result<VolumeSplit> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let unique: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = unique.len();
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();
    if n < wanted {
        return Err(Error::data("split_dataset", format!("{n} volumes cannot fill {wanted} splits")));
    }

    let exact = fractions.map(|f| f * n as f64);
    let mut sizes = exact.map(|e| e.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle().take(3 * n) {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("three splits");
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }

    let mut shuffled = unique;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = shuffled.into_iter();
    let mut take = |k: usize| {
        let mut v: Vec<String> = rest.by_ref().take(k).collect();
        v.sort();
        v
    };
    Ok(VolumeSplit { train: take(sizes[0]), val: take(sizes[1]), test: take(sizes[2]) })
}

/// Partitions samples by volume; every slice of a volume lands in one split.
pub fn split_dataset(samples: Vec<SliceSample>, seed: u64, fractions: [f64; 3]) -> Result<(DatasetSplit, VolumeSplit)> {
    let ids: Vec<String> = samples.iter().map(|s| s.volume_id.clone()).collect();
    let volumes = split_volume_ids(&ids, seed, fractions)?;
    Ok((apply_split(samples, &volumes), volumes))
}

pub fn apply_split(samples: Vec<SliceSample>, volumes: &VolumeSplit) -> DatasetSplit {
    let val: BTreeSet<&str> = volumes.val.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = volumes.test.iter().map(String::as_str).collect();
    let mut out = DatasetSplit::default();
    for s in samples {
        if val.contains(s.volume_id.as_str()) {
            out.val.push(s);
        } else if test.contains(s.volume_id.as_str()) {
            out.test.push(s);
        } else {
            out.train.push(s);
        }
    }
    out
}

/// Binary mask `prob >= threshold`.
pub fn binarize(probs: &[f32], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(f64::from(p) >= threshold)).collect()
}

/// Order in which overlapping region predictions claim a voxel.
pub const DEFAULT_PRECEDENCE: [RegionId; 3] = [RegionId::Enhancing, RegionId::NcrNet, RegionId::Edema];

/// Fuses per-region masks (in [`RegionId::ALL`] order) into labels using
/// [`DEFAULT_PRECEDENCE`].
pub fn fuse_regions(masks: [&[u8]; 3]) -> Result<Vec<u8>> {
    fuse_regions_with(masks, DEFAULT_PRECEDENCE)
}

pub fn fuse_regions_with(masks: [&[u8]; 3], precedence: [RegionId; 3]) -> Result<Vec<u8>> {
    let n = masks[0].len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::ExtentMismatch {
            op: "fuse_regions",
            left: vec![n],
            right: masks.iter().map(|m| m.len()).collect(),
        });
    }
    let distinct: BTreeSet<_> = precedence.iter().collect();
    if distinct.len() != 3 {
        return Err(Error::Config(format!("fusion precedence {precedence:?} must list each region once")));
    }
    Ok((0..n)
        .map(|i| precedence.iter().find(|r| masks[r.index()][i] != 0).map_or(0, |r| r.label()))
        .collect())
}

/// Places each `(slice_index, map)` at its index; order of `maps` is irrelevant.
pub fn stack_slices(
    id: impl Into<String>,
    maps: Vec<(usize, Vec<u8>)>,
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<SegVolume> {
    let [depth, h, w] = shape;
    let n = h * w;
    let mut labels = vec![0u8; depth * n];
    let mut seen = vec![false; depth];
    for (z, map) in maps {
        if z >= depth || seen[z] {
            return Err(Error::data("stack_slices", format!("slice index {z} is out of range or repeated")));
        }
        if map.len() != n {
            return Err(Error::ExtentMismatch { op: "stack_slices", left: vec![map.len()], right: vec![h, w] });
        }
        labels[z * n..(z + 1) * n].copy_from_slice(&map);
        seen[z] = true;
    }
    if let Some(z) = seen.iter().position(|s| !s) {
        return Err(Error::MissingSlice(z));
    }
    SegVolume::new(id, shape, labels, spacing)
}

/// Symmetric zero padding of a `[C, H, W]` image stack up to multiples of `multiple`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub top: usize,
    pub left: usize,
}

impl Padding {
    pub fn for_extent(height: usize, width: usize, multiple: usize) -> Self {
        let padded_height = height.div_ceil(multiple) * multiple;
        let padded_width = width.div_ceil(multiple) * multiple;
        Self {
            height,
            width,
            padded_height,
            padded_width,
            top: (padded_height - height) / 2,
            left: (padded_width - width) / 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }

    pub fn pad<T: Copy + Default>(&self, image: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::default(); channels * self.padded_height * self.padded_width];
        for c in 0..channels {
            for y in 0..self.height {
                let src = (c * self.height + y) * self.width;
                let dst = (c * self.padded_height + y + self.top) * self.padded_width + self.left;
                out[dst..dst + self.width].copy_from_slice(&image[src..src + self.width]);
            }
        }
        out
    }

    pub fn crop<T: Copy>(&self, image: &[T], channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(channels * self.height * self.width);
        for c in 0..channels {
            for y in 0..self.height {
                let src = (c * self.padded_height + y + self.top) * self.padded_width + self.left;
                out.extend_from_slice(&image[src..src + self.width]);
            }
        }
        out
    }
}
