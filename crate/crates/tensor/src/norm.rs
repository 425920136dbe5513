//! Per-channel batch normalization over `(batch, height, width)`.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::LayerGrads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and report updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { momentum: 0.99, epsilon: 1e-3 }
    }
}

/// Borrowed parameters of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput<T = f32> {
    pub output: Tensor<T>,
    /// Running statistics after this call; unchanged in [`Mode::Infer`].
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub ctx: BatchNormCtx<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCtx<T = f32> {
    mode: Mode,
    normalized: Tensor<T>,
    gamma: Tensor<T>,
    inv_std: Vec<f64>,
}

pub fn batchnorm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    params: BatchNormParams<'_, T>,
    mode: Mode,
    config: BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    let (n, c, h, w) = input.dims4()?;
    for (name, t) in [
        ("gamma", params.gamma),
        ("beta", params.beta),
        ("running_mean", params.running_mean),
        ("running_var", params.running_var),
    ] {
        if t.shape() != [c] {
            return Err(TensorError::InvalidArgument {
                op: "batchnorm2d",
                reason: format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            });
        }
    }
    if n == 0 {
        return Err(TensorError::EmptyBatch { op: "batchnorm2d" });
    }
    if !(config.epsilon > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "batchnorm2d",
            reason: format!("epsilon must be positive, got {}", config.epsilon),
        });
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.data();

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => (0..c)
            .map(|ch| {
                let mut sum = 0.0;
                for b in 0..n {
                    let s = (b * c + ch) * plane;
                    sum += x[s..s + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for b in 0..n {
                    let s = (b * c + ch) * plane;
                    sq += x[s..s + plane].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                (mean, sq / count)
            })
            .unzip(),
        Mode::Infer => (
            params.running_mean.data().iter().map(|v| v.as_f64()).collect(),
            params.running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.epsilon).sqrt()).collect();

    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * plane;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, be) = (params.gamma.data()[ch], params.beta.data()[ch]);
            for i in s..s + plane {
                let xh = T::from_f64_lossy((x[i].as_f64() - m) * is);
                normalized[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }

    let (running_mean, running_var) = match mode {
        Mode::Train => {
            let k = config.momentum;
            let update = |old: &Tensor<T>, batch: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(o, b)| T::from_f64_lossy(k * o.as_f64() + (1.0 - k) * b))
                    .collect();
                Tensor::from_parts(vec![c], data)
            };
            (update(params.running_mean, &mean), update(params.running_var, &var))
        }
        Mode::Infer => (params.running_mean.clone(), params.running_var.clone()),
    };

    Ok(BatchNormOutput {
        output: Tensor::from_parts(input.shape().to_vec(), out),
        running_mean,
        running_var,
        ctx: BatchNormCtx {
            mode,
            normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
            gamma: params.gamma.clone(),
            inv_std,
        },
    })
}

/// Gradients for input, `gamma`, and `beta`.
pub fn batchnorm2d_backward<T: Scalar>(ctx: &BatchNormCtx<T>, output_grad: &Tensor<T>) -> Result<LayerGrads<T>> {
    if output_grad.shape() != ctx.normalized.shape() {
        return Err(TensorError::StaleContext {
            op: "batchnorm2d_backward",
            expected: ctx.normalized.shape().to_vec(),
            actual: output_grad.shape().to_vec(),
        });
    }
    let (n, c, h, w) = output_grad.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let dy = output_grad.data();
    let xh = ctx.normalized.data();

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * plane;
            for i in s..s + plane {
                dbeta[ch] += dy[i].as_f64();
                dgamma[ch] += dy[i].as_f64() * xh[i].as_f64();
            }
        }
    }

    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * plane;
            let scale = ctx.gamma.data()[ch].as_f64() * ctx.inv_std[ch];
            for i in s..s + plane {
                let v = match ctx.mode {
                    Mode::Train => {
                        scale * (dy[i].as_f64() - dbeta[ch] / count - xh[i].as_f64() * dgamma[ch] / count)
                    }
                    Mode::Infer => scale * dy[i].as_f64(),
                };
                dx[i] = T::from_f64_lossy(v);
            }
        }
    }

    let to_tensor = |v: Vec<f64>| Tensor::from_parts(vec![c], v.into_iter().map(T::from_f64_lossy).collect());
    Ok(LayerGrads {
        input_grad: Tensor::from_parts(output_grad.shape().to_vec(), dx),
        param_grads: vec![("gamma", to_tensor(dgamma)), ("beta", to_tensor(dbeta))],
    })
}
