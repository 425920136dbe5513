//! Volume-level segmentation with the three region models.

use crate::error::Result;
use crate::model::ModelParams;
use crate::pipeline::{
    binarize, fuse_regions, normalize_volume, stack_slices, RegionId, SegVolume, SliceSample, Thresholds, VolumeScan,
};
use crate::training::predict_samples;

/// Region models in [`RegionId::ALL`] order.
pub type RegionModels<'a> = [&'a ModelParams<f32>; 3];

/// Input-only slices of a normalized scan.
fn scan_slices(scan: &VolumeScan) -> Vec<SliceSample> {
    let [depth, height, width] = scan.shape;
    let n = height * width;
    (0..depth)
        .map(|z| SliceSample {
            volume_id: scan.id.clone(),
            slice_index: z,
            height,
            width,
            inputs: (0..4).flat_map(|m| scan.modality(m)[z * n..(z + 1) * n].iter().copied()).collect(),
            targets: vec![0; 3 * n],
        })
        .collect()
}

/// Per-region probability volumes of a raw scan, each `D*H*W` long.
pub fn region_probabilities(models: RegionModels<'_>, scan: &VolumeScan, batch_size: usize) -> Result<[Vec<f32>; 3]> {
    let normalized = normalize_volume(scan)?;
    let slices = scan_slices(&normalized);
    let refs: Vec<&SliceSample> = slices.iter().collect();
    let mut out: [Vec<f32>; 3] = Default::default();
    for (k, params) in models.iter().enumerate() {
        out[k] = predict_samples(params, &refs, batch_size)?.concat();
    }
    Ok(out)
}

/// Normalize, slice, run the three models, binarize each at its own
/// threshold, fuse and restack into a label volume.
pub fn segment_volume(
    models: RegionModels<'_>,
    thresholds: &Thresholds,
    scan: &VolumeScan,
    batch_size: usize,
) -> Result<SegVolume> {
    thresholds.validate()?;
    let probs = region_probabilities(models, scan, batch_size)?;
    let masks = RegionId::ALL.map(|r| binarize(&probs[r.index()], thresholds.get(r)));
    let fused = fuse_regions([&masks[0], &masks[1], &masks[2]])?;
    let plane = scan.shape[1] * scan.shape[2];
    let maps = fused.chunks(plane).enumerate().map(|(z, m)| (z, m.to_vec())).collect();
    stack_slices(scan.id.clone(), maps, scan.shape, scan.spacing)
}
