use std::path::Path;

use mtau_tensor::BatchNormConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture whose parameter count matches the published totals.
pub const PAPER_CONFIG_JSON: &str = include_str!("../../configs/paper.json");
/// Small architecture for CPU-scale experiments on 64x64 slices.
pub const DESK_CONFIG_JSON: &str = include_str!("../../configs/desk.json");

/// Deepest supported encoder; the smallest accepted input is `2^depth` per side.
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// 2x2 stride-2 transposed convolution.
    #[default]
    Transposed,
    /// Nearest-neighbour doubling with no parameters.
    Nearest,
}

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    BatchNormConfig::default().momentum
}

fn default_epsilon() -> f64 {
    BatchNormConfig::default().epsilon
}

/// Architecture of one attention U-Net.
///
/// The encoder has `depth` levels followed by a bottleneck. Level widths are
/// `base_filters * 2^level` unless `filters_per_level` lists all `depth + 1`
/// widths explicitly (bottleneck last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters_per_level: Option<Vec<usize>>,
    /// Gate widths per skip level (shallowest first); defaults to half the skip width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_inter_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub upsample_mode: UpsampleMode,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_epsilon")]
    pub bn_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 1,
            depth: 4,
            base_filters: 16,
            filters_per_level: None,
            attention_inter_channels: None,
            upsample_mode: UpsampleMode::Transposed,
            batchnorm: true,
            bn_momentum: default_momentum(),
            bn_epsilon: default_epsilon(),
        }
    }
}

impl ModelConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paper() -> Self {
        Self::from_json_str(PAPER_CONFIG_JSON).expect("bundled paper config is valid")
    }

    pub fn desk() -> Self {
        Self::from_json_str(DESK_CONFIG_JSON).expect("bundled desk config is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Widths of the encoder levels followed by the bottleneck.
    pub fn filters(&self) -> Vec<usize> {
        match &self.filters_per_level {
            Some(f) => f.clone(),
            None => (0..=self.depth).map(|l| self.base_filters << l).collect(),
        }
    }

    pub fn inter_channels(&self) -> Vec<usize> {
        match &self.attention_inter_channels {
            Some(c) => c.clone(),
            None => self.filters()[..self.depth].iter().map(|f| (f / 2).max(1)).collect(),
        }
    }

    pub fn bn_config(&self) -> BatchNormConfig {
        BatchNormConfig { momentum: self.bn_momentum, epsilon: self.bn_epsilon }
    }

    /// Spatial extents must be multiples of this value.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.depth > MAX_DEPTH {
            return fail(format!(
                "depth {} needs inputs of at least {}x{} pixels; the deepest supported model is depth {MAX_DEPTH} ({}x{} minimum input)",
                self.depth,
                1usize << self.depth.min(30),
                1usize << self.depth.min(30),
                1 << MAX_DEPTH,
                1 << MAX_DEPTH
            ));
        }
        let filters = self.filters();
        if filters.len() != self.depth + 1 {
            return fail(format!(
                "filters_per_level has {} entries, expected depth + 1 = {}",
                filters.len(),
                self.depth + 1
            ));
        }
        if filters[0] == 0 || filters.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!("filter widths must be positive and strictly increasing, got {filters:?}"));
        }
        let inter = self.inter_channels();
        if inter.len() != self.depth || inter.contains(&0) {
            return fail(format!("attention_inter_channels must list {} positive widths", self.depth));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return fail("batch-norm epsilon must be positive and momentum in [0, 1)".into());
        }
        Ok(())
    }
}
