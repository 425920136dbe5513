//! Loss, optimizer and the per-region training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use log::{debug, info};
use mtau_tensor::{Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, build_model, forward, predict, save_checkpoint, Gradients, ModelConfig, ModelParams};
use crate::pipeline::{Padding, RegionId, SliceSample};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy and its gradient with respect to `pred`.
///
/// The gradient is evaluated at the clamped probability and passed straight
/// through the clamp, so saturated outputs still receive a signal.
pub fn bce_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
    target.expect_shape("bce_loss", pred.shape())?;
    if let Some(t) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::data("bce_loss", format!("target value {t} is not 0 or 1")));
    }
    let n = pred.len() as f64;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = f64::from(p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let t = f64::from(t);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push(((p - t) / (p * (1.0 - p)) / n) as f32);
    }
    Ok((total / n, Tensor::new(pred.shape(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
    pub t: u64,
}

/// One Adam update of every parameter that has a gradient.
///
/// Each tensor is updated independently, so the order of `grads` does not
/// matter. The step counter is incremented before bias correction.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        g.expect_shape("adam_step", p.shape())?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = f64::from(g.data()[i]);
            let mi = config.beta1 * f64::from(md[i]) + (1.0 - config.beta1) * gi;
            let vi = config.beta2 * f64::from(vd[i]) + (1.0 - config.beta2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let step = config.learning_rate * (mi / c1) / ((vi / c2).sqrt() + config.epsilon);
            pd[i] = (f64::from(pd[i]) - step) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Where the best checkpoint and history CSV go; nothing is written when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 50,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Seed of one region's model, derived from the run seed.
pub fn region_seed(seed: u64, region: RegionId) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(u64::from(region.label()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Pooled pixel Dice on the validation set at threshold 0.5.
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub region: Option<RegionId>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_dice);
        }
        out
    }
}

/// Batches of model inputs for slices sharing one in-plane extent.
pub struct SliceBatcher {
    pad: Padding,
}

impl SliceBatcher {
    pub fn new(samples: &[&SliceSample], multiple: usize) -> Result<Self> {
        let first = samples.first().ok_or(Error::Empty("slice set"))?;
        if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (first.height, first.width)) {
            return Err(Error::ExtentMismatch {
                op: "slice batch",
                left: vec![first.height, first.width],
                right: vec![s.height, s.width],
            });
        }
        Ok(Self { pad: Padding::for_extent(first.height, first.width, multiple) })
    }

    pub fn padding(&self) -> Padding {
        self.pad
    }

    /// `[n, 4, H', W']` padded inputs.
    pub fn inputs(&self, batch: &[&SliceSample]) -> Result<Tensor<f32>> {
        let p = &self.pad;
        let mut data = Vec::with_capacity(batch.len() * 4 * p.padded_height * p.padded_width);
        for s in batch {
            data.extend(p.pad(&s.inputs, 4));
        }
        Ok(Tensor::new(&[batch.len(), 4, p.padded_height, p.padded_width], data)?)
    }

    /// `[n, 1, H, W]` targets of one region, unpadded.
    pub fn targets(&self, batch: &[&SliceSample], region: RegionId) -> Result<Tensor<f32>> {
        let data = batch.iter().flat_map(|s| s.target(region).iter().map(|&t| f32::from(t))).collect();
        Ok(Tensor::new(&[batch.len(), 1, self.pad.height, self.pad.width], data)?)
    }

    pub fn crop(&self, probs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = probs.shape()[0];
        let per = self.pad.padded_height * self.pad.padded_width;
        let data = (0..n).flat_map(|i| self.pad.crop(&probs.data()[i * per..(i + 1) * per], 1)).collect();
        Ok(Tensor::new(&[n, 1, self.pad.height, self.pad.width], data)?)
    }

    pub fn uncrop(&self, grad: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = grad.shape()[0];
        let per = self.pad.height * self.pad.width;
        let data = (0..n).flat_map(|i| self.pad.pad(&grad.data()[i * per..(i + 1) * per], 1)).collect();
        Ok(Tensor::new(&[n, 1, self.pad.padded_height, self.pad.padded_width], data)?)
    }
}

/// Probability maps (cropped to the slice extent) for every sample, in order.
pub fn predict_samples(params: &ModelParams<f32>, samples: &[&SliceSample], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let batcher = SliceBatcher::new(samples, params.config().size_multiple())?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let probs = batcher.crop(&predict(params, &batcher.inputs(chunk)?)?)?;
        let per = probs.len() / chunk.len();
        out.extend(probs.data().chunks(per).map(<[f32]>::to_vec));
    }
    Ok(out)
}

struct Evaluation {
    loss: f64,
    dice: f64,
}

fn evaluate(
    params: &ModelParams<f32>,
    samples: &[&SliceSample],
    batcher: &SliceBatcher,
    region: RegionId,
    batch_size: usize,
) -> Result<Evaluation> {
    let (mut loss_sum, mut count) = (0.0f64, 0usize);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for chunk in samples.chunks(batch_size) {
        let probs = batcher.crop(&predict(params, &batcher.inputs(chunk)?)?)?;
        let target = batcher.targets(chunk, region)?;
        let (loss, _) = bce_loss(&probs, &target)?;
        loss_sum += loss * probs.len() as f64;
        count += probs.len();
        for (&p, &t) in probs.data().iter().zip(target.data()) {
            match (p >= 0.5, t == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(Evaluation {
        loss: loss_sum / count as f64,
        dice: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub history: TrainHistory,
}

/// File names used under `checkpoint_dir` for one region.
pub fn checkpoint_file(region: RegionId) -> String {
    format!("region_{}.json", region.label())
}

pub fn history_file(region: RegionId) -> String {
    format!("region_{}_history.csv", region.label())
}

/// Trains one region model and returns the parameters of the epoch with the
/// lowest validation loss.
pub fn train_region_model(
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    region: RegionId,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_region_model_with(train_set, val_set, region, model_config, config, |_, _| {})
}

/// [`train_region_model`] that also hands every finished epoch and the
/// current parameters to `on_epoch`.
pub fn train_region_model_with(
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    region: RegionId,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams<f32>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let seed = region_seed(config.seed, region);
    let mut params = build_model(model_config, seed)?;
    let train: Vec<&SliceSample> = train_set.iter().collect();
    let val: Vec<&SliceSample> = val_set.iter().collect();
    let batcher = SliceBatcher::new(&train, model_config.size_multiple())?;
    let val_batcher = SliceBatcher::new(&val, model_config.size_multiple())?;
    let adam = config.adam();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464C_4521);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory { region: Some(region), epochs: Vec::with_capacity(config.epochs), best_epoch: 0 };
    let mut best: Option<(f64, ModelParams<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0f64, 0usize);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SliceSample> = idx.iter().map(|&i| train[i]).collect();
            let out = forward(&params, &batcher.inputs(&batch)?, Mode::Train)?;
            let probs = batcher.crop(&out.probs)?;
            let (loss, grad) = bce_loss(&probs, &batcher.targets(&batch, region)?)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = backward(&params, &out.cache, &batcher.uncrop(&grad)?)?;
            if grads.param_grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            for (name, stat) in out.running_stats {
                *params.get_mut(&name)? = stat;
            }
            adam_step(&mut params, &grads.param_grads, &mut state, &adam)?;
            loss_sum += loss * probs.len() as f64;
            count += probs.len();
            debug!("region {region} epoch {epoch} batch {bi}: loss {loss:.6}");
        }
        let eval = evaluate(&params, &val, &val_batcher, region, config.batch_size)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: order.len().div_ceil(config.batch_size) });
        }
        let record = EpochRecord { epoch, train_loss: loss_sum / count as f64, val_loss: eval.loss, val_dice: eval.dice };
        info!(
            "region {region} epoch {epoch}/{}: train {:.5} val {:.5} dice {:.4}",
            config.epochs, record.train_loss, record.val_loss, record.val_dice
        );
        on_epoch(&record, &params);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(l, _)| eval.loss < *l) {
            best = Some((eval.loss, params.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");

    if let Some(dir) = &config.checkpoint_dir {
        let best_record = history.best().copied().expect("best epoch recorded");
        let metadata = serde_json::json!({
            "region": region.label(),
            "best_epoch": best_record.epoch,
            "val_loss": best_record.val_loss,
            "val_dice": best_record.val_dice,
            "epochs": config.epochs,
            "seed": config.seed,
        });
        save_checkpoint(&best, &dir.join(checkpoint_file(region)), metadata)?;
        let path = dir.join(history_file(region));
        std::fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { best, history })
}
