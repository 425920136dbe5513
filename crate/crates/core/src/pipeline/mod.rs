//! The data path around the region models: normalization, slicing,
//! zero-slice filtering, volume-wise splitting, target extraction,
//! threshold selection, binarization, fusion and restacking.

pub mod container;
mod preprocess;
mod threshold;
mod types;

pub use preprocess::{
    apply_split, binarize, filter_zero_slices, fuse_regions, fuse_regions_with, labels_to_binary_maps,
    normalize_volume, slice_volumes, split_dataset, split_volume_ids, stack_slices, DatasetSplit, Padding,
    VolumeSplit, DEFAULT_PRECEDENCE,
};
pub use threshold::{select_threshold, RocPoint, ThresholdChoice, ThresholdCriterion, DEFAULT_THRESHOLD};
pub use types::{RegionId, SegVolume, SliceSample, Thresholds, VolumeScan, MODALITIES};
