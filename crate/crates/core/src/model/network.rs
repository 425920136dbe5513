//! Forward and backward passes of the attention U-Net.

use indexmap::IndexMap;
use mtau_tensor::{
    batchnorm2d_backward, batchnorm2d_forward, concat_channels, conv2d_backward, conv2d_forward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, transposed_conv2d_backward,
    transposed_conv2d_forward, upsample2x, upsample2x_backward, BatchNormCtx, BatchNormParams, Conv2dCtx, LayerGrads,
    Mode, PoolIndices, Scalar, Tensor, TransposedConv2dCtx,
};

use super::config::UpsampleMode;
use super::gate::{attention_gate, attention_gate_backward, AttentionGateParams, GateCache};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Gradients keyed by trainable parameter name.
pub type Gradients<T = f32> = IndexMap<String, Tensor<T>>;

#[derive(Debug, Clone)]
struct ConvUnitCache<T> {
    prefix: String,
    conv: Conv2dCtx<T>,
    bn: Option<BatchNormCtx<T>>,
    activated: Tensor<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    first: ConvUnitCache<T>,
    second: ConvUnitCache<T>,
}

#[derive(Debug, Clone)]
enum UpCache<T> {
    Transposed(TransposedConv2dCtx<T>),
    Nearest,
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    level: usize,
    up: UpCache<T>,
    gate: GateCache<T>,
    skip_channels: usize,
    block: BlockCache<T>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    input_shape: Vec<usize>,
    encoders: Vec<(BlockCache<T>, PoolIndices)>,
    bottleneck: BlockCache<T>,
    decoders: Vec<DecoderCache<T>>,
    head: Conv2dCtx<T>,
    probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    /// Per-pixel probabilities, `[n, out_channels, h, w]`, strictly inside (0, 1).
    pub probs: Tensor<T>,
    pub cache: ForwardCache<T>,
    /// Updated batch-norm running statistics (train mode only).
    pub running_stats: Vec<(String, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T = f32> {
    pub input_grad: Tensor<T>,
    pub param_grads: Gradients<T>,
}

struct Runner<'a, T: Scalar> {
    params: &'a ModelParams<T>,
    mode: Mode,
    running_stats: Vec<(String, Tensor<T>)>,
}

impl<'a, T: Scalar> Runner<'a, T> {
    fn conv_unit(&mut self, input: &Tensor<T>, prefix: String, conv: &str, bn: &str) -> Result<ConvUnitCache<T>> {
        let p = self.params;
        let (y, conv_ctx) = conv2d_forward(
            input,
            p.get(&format!("{prefix}.{conv}.weight"))?,
            p.get(&format!("{prefix}.{conv}.bias"))?,
            1,
            1,
        )?;
        let (y, bn_ctx) = if p.config().batchnorm {
            let bp = |s: &str| p.get(&format!("{prefix}.{bn}.{s}"));
            let out = batchnorm2d_forward(
                &y,
                BatchNormParams {
                    gamma: bp("gamma")?,
                    beta: bp("beta")?,
                    running_mean: bp("running_mean")?,
                    running_var: bp("running_var")?,
                },
                self.mode,
                p.config().bn_config(),
            )?;
            if self.mode == Mode::Train {
                self.running_stats.push((format!("{prefix}.{bn}.running_mean"), out.running_mean));
                self.running_stats.push((format!("{prefix}.{bn}.running_var"), out.running_var));
            }
            (out.output, Some(out.ctx))
        } else {
            (y, None)
        };
        Ok(ConvUnitCache { prefix: format!("{prefix}.{conv}|{prefix}.{bn}"), conv: conv_ctx, bn: bn_ctx, activated: relu(&y) })
    }

    fn block(&mut self, input: &Tensor<T>, prefix: &str) -> Result<BlockCache<T>> {
        let first = self.conv_unit(input, prefix.to_string(), "conv1", "bn1")?;
        let second = self.conv_unit(&first.activated, prefix.to_string(), "conv2", "bn2")?;
        Ok(BlockCache { first, second })
    }
}

fn check_input<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<()> {
    let cfg = params.config();
    let (_, c, h, w) = batch.dims4()?;
    if c != cfg.in_channels {
        return Err(Error::ExtentMismatch {
            op: "forward (channels)",
            left: vec![c],
            right: vec![cfg.in_channels],
        });
    }
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::IndivisibleInput { height: h, width: w, multiple: m });
    }
    Ok(())
}

/// Runs the network on `batch` (`[n, in_channels, h, w]`, `h` and `w`
/// divisible by `2^depth`).
///
/// Train mode normalizes with batch statistics and reports the updated
/// running statistics; `params` is never mutated.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
    check_input(params, batch)?;
    let cfg = params.config().clone();
    let mut run = Runner { params, mode, running_stats: Vec::new() };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut encoders = Vec::with_capacity(cfg.depth);
    let mut current = batch.clone();
    for level in 0..cfg.depth {
        let block = run.block(&current, &format!("enc{level}"))?;
        let (pooled, idx) = maxpool2d(&block.second.activated)?;
        skips.push(block.second.activated.clone());
        encoders.push((block, idx));
        current = pooled;
    }
    let bottleneck = run.block(&current, "bottleneck")?;
    current = bottleneck.second.activated.clone();

    let mut decoders = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let (up, up_cache) = match cfg.upsample_mode {
            UpsampleMode::Transposed => {
                let (y, ctx) = transposed_conv2d_forward(
                    &current,
                    params.get(&format!("dec{level}.up.weight"))?,
                    params.get(&format!("dec{level}.up.bias"))?,
                    2,
                )?;
                (y, UpCache::Transposed(ctx))
            }
            UpsampleMode::Nearest => (upsample2x(&current)?, UpCache::Nearest),
        };
        let skip = &skips[level];
        let gp = |s: &str| params.get(&format!("dec{level}.gate.{s}"));
        let (gated, gate) = attention_gate(
            &up,
            skip,
            AttentionGateParams {
                wg_weight: gp("wg.weight")?,
                wg_bias: gp("wg.bias")?,
                wx_weight: gp("wx.weight")?,
                psi_weight: gp("psi.weight")?,
                psi_bias: gp("psi.bias")?,
            },
        )?;
        let merged = concat_channels(&gated, &up)?;
        let block = run.block(&merged, &format!("dec{level}"))?;
        current = block.second.activated.clone();
        decoders.push(DecoderCache { level, up: up_cache, gate, skip_channels: skip.shape()[1], block });
    }

    let (logits, head) = conv2d_forward(&current, params.get("head.weight")?, params.get("head.bias")?, 1, 0)?;
    let probs = sigmoid(&logits);
    let running_stats = std::mem::take(&mut run.running_stats);
    Ok(ForwardOutput {
        probs: probs.clone(),
        cache: ForwardCache {
            input_shape: batch.shape().to_vec(),
            encoders,
            bottleneck,
            decoders,
            head,
            probs,
        },
        running_stats,
    })
}

/// Probability map only, in inference mode.
pub fn predict<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward(params, batch, Mode::Infer)?.probs)
}

struct GradSink<T> {
    grads: Gradients<T>,
}

impl<T: Scalar> GradSink<T> {
    fn put(&mut self, name: String, g: Tensor<T>) {
        self.grads.insert(name, g);
    }

    fn layer(&mut self, prefix: &str, mut grads: LayerGrads<T>) -> Tensor<T> {
        for (role, g) in grads.param_grads.drain(..) {
            self.grads.insert(format!("{prefix}.{role}"), g);
        }
        grads.input_grad
    }

    fn unit(&mut self, cache: &ConvUnitCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (conv_name, bn_name) = cache.prefix.split_once('|').expect("unit prefix");
        let mut g = relu_backward(&cache.activated, grad)?;
        if let Some(bn) = &cache.bn {
            g = self.layer(bn_name, batchnorm2d_backward(bn, &g)?);
        }
        Ok(self.layer(conv_name, conv2d_backward(&cache.conv, &g)?))
    }

    fn block(&mut self, cache: &BlockCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.unit(&cache.second, grad)?;
        self.unit(&cache.first, &g)
    }
}

/// Gradients of `<probs, prob_grad>` with respect to the input and every
/// trainable parameter.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    prob_grad: &Tensor<T>,
) -> Result<BackwardOutput<T>> {
    prob_grad.expect_shape("model backward", cache.probs.shape())?;
    let mut sink = GradSink { grads: IndexMap::new() };

    let dlogits = sigmoid_backward(&cache.probs, prob_grad)?;
    let mut current = sink.layer("head", conv2d_backward(&cache.head, &dlogits)?);

    let depth = cache.encoders.len();
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
    for dec in cache.decoders.iter().rev() {
        let level = dec.level;
        let dmerged = sink.block(&dec.block, &current)?;
        let (dgated, mut dup) = split_channels(&dmerged, dec.skip_channels)?;
        let gate = attention_gate_backward(&dec.gate, &dgated)?;
        dup.add_assign(&gate.g)?;
        let pre = format!("dec{level}.gate");
        sink.put(format!("{pre}.wg.weight"), gate.wg_weight);
        sink.put(format!("{pre}.wg.bias"), gate.wg_bias);
        sink.put(format!("{pre}.wx.weight"), gate.wx_weight);
        sink.put(format!("{pre}.psi.weight"), gate.psi_weight);
        sink.put(format!("{pre}.psi.bias"), gate.psi_bias);
        skip_grads[level] = Some(gate.x);
        current = match &dec.up {
            UpCache::Transposed(ctx) => sink.layer(&format!("dec{level}.up"), transposed_conv2d_backward(ctx, &dup)?),
            UpCache::Nearest => upsample2x_backward(&dup)?,
        };
    }

    current = sink.block(&cache.bottleneck, &current)?;
    for level in (0..depth).rev() {
        let (block, idx) = &cache.encoders[level];
        let mut g = maxpool2d_backward(idx, &current)?;
        if let Some(s) = skip_grads[level].take() {
            g.add_assign(&s)?;
        }
        current = sink.block(block, &g)?;
    }
    current.expect_shape("model backward input", &cache.input_shape)?;

    // Report gradients in parameter order.
    let mut ordered = IndexMap::with_capacity(sink.grads.len());
    for (name, _) in params.trainable() {
        let g = sink
            .grads
            .swap_remove(name)
            .ok_or_else(|| Error::Config(format!("no gradient produced for {name}")))?;
        ordered.insert(name.to_string(), g);
    }
    Ok(BackwardOutput { input_grad: current, param_grads: ordered })
}
