use indexmap::IndexMap;
use mtau_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, UpsampleMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics.
    RunningStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Named weights of one attention U-Net, in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_entries(config: ModelConfig, entries: IndexMap<String, ParamEntry<T>>) -> Self {
        Self { config, entries }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &IndexMap<String, ParamEntry<T>> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(n, e)| (n.as_str(), &e.tensor))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), ParamEntry { tensor: e.tensor.cast(), kind: e.kind }))
                .collect(),
        }
    }
}

pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for entry in params.entries.values() {
        match entry.kind {
            ParamKind::Trainable => counts.trainable += entry.tensor.len(),
            ParamKind::RunningStat => counts.non_trainable += entry.tensor.len(),
        }
    }
    counts.total = counts.trainable + counts.non_trainable;
    counts
}

struct Builder {
    rng: ChaCha8Rng,
    entries: IndexMap<String, ParamEntry<f32>>,
}

impl Builder {
    fn push(&mut self, name: String, tensor: Tensor<f32>, kind: ParamKind) {
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, kind });
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// He-normal kernel with the given fan-in.
    fn kernel(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng) as f32)?;
        self.push(name, t, ParamKind::Trainable);
        Ok(())
    }

    fn constant(&mut self, name: String, len: usize, value: f32, kind: ParamKind) -> Result<()> {
        self.push(name, Tensor::full(&[len], value)?, kind);
        Ok(())
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<()> {
        self.kernel(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k)?;
        if bias {
            self.constant(format!("{prefix}.bias"), cout, 0.0, ParamKind::Trainable)?;
        }
        Ok(())
    }

    fn batchnorm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.constant(format!("{prefix}.gamma"), channels, 1.0, ParamKind::Trainable)?;
        self.constant(format!("{prefix}.beta"), channels, 0.0, ParamKind::Trainable)?;
        self.constant(format!("{prefix}.running_mean"), channels, 0.0, ParamKind::RunningStat)?;
        self.constant(format!("{prefix}.running_var"), channels, 1.0, ParamKind::RunningStat)?;
        Ok(())
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize, batchnorm: bool) -> Result<()> {
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3, true)?;
        if batchnorm {
            self.batchnorm(&format!("{prefix}.bn1"), cout)?;
        }
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, true)?;
        if batchnorm {
            self.batchnorm(&format!("{prefix}.bn2"), cout)?;
        }
        Ok(())
    }
}

/// Deterministically initialized parameters for `config`.
///
/// Kernels are He-normal over their fan-in; biases and `beta` start at 0,
/// `gamma` at 1, running means at 0 and running variances at 1.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let filters = config.filters();
    let inter = config.inter_channels();
    let bn = config.batchnorm;
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), entries: IndexMap::new() };

    let mut cin = config.in_channels;
    for (level, &f) in filters[..config.depth].iter().enumerate() {
        b.double_conv(&format!("enc{level}"), cin, f, bn)?;
        cin = f;
    }
    b.double_conv("bottleneck", cin, filters[config.depth], bn)?;

    for level in (0..config.depth).rev() {
        let skip = filters[level];
        let below = filters[level + 1];
        let up_channels = match config.upsample_mode {
            UpsampleMode::Transposed => {
                // transposed kernels are laid out [in, out, kh, kw]
                b.kernel(format!("dec{level}.up.weight"), &[below, skip, 2, 2], below * 4)?;
                b.constant(format!("dec{level}.up.bias"), skip, 0.0, ParamKind::Trainable)?;
                skip
            }
            UpsampleMode::Nearest => below,
        };
        let k = inter[level];
        b.conv(&format!("dec{level}.gate.wg"), up_channels, k, 1, true)?;
        b.conv(&format!("dec{level}.gate.wx"), skip, k, 1, false)?;
        b.conv(&format!("dec{level}.gate.psi"), k, 1, 1, true)?;
        b.double_conv(&format!("dec{level}"), skip + up_channels, skip, bn)?;
    }
    b.conv("head", filters[0], config.out_channels, 1, true)?;

    Ok(ModelParams { config: config.clone(), entries: b.entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_parameter_set_counts_zero() {
        let p: ModelParams<f32> = ModelParams::from_entries(ModelConfig::default(), IndexMap::new());
        assert_eq!(count_params(&p), ParamCounts { total: 0, trainable: 0, non_trainable: 0 });
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ModelConfig { depth: 2, base_filters: 4, ..Default::default() };
        assert_eq!(build_model(&cfg, 3).unwrap(), build_model(&cfg, 3).unwrap());
        assert_ne!(build_model(&cfg, 3).unwrap(), build_model(&cfg, 4).unwrap());
    }

    #[test]
    fn initial_values_follow_conventions() {
        let cfg = ModelConfig { depth: 1, base_filters: 4, ..Default::default() };
        let p = build_model(&cfg, 0).unwrap();
        assert!(p.get("enc0.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("enc0.bn1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("enc0.bn1.running_var").unwrap().data().iter().all(|&v| v == 1.0));
        let w = p.get("enc0.conv1.weight").unwrap();
        let var = w.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        // He variance 2 / fan_in = 2 / 36
        assert!((var - 2.0 / 36.0).abs() < 0.02, "{var}");
    }
}
