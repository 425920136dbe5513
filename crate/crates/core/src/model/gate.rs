//! Additive attention gate on a skip connection.
//!
//! `alpha = sigmoid(psi(relu(Wg * g + Wx * x)))` is a one-channel map in (0, 1)
//! that rescales every channel of the skip features `x`. The gating signal
//! `g` comes from the decoder and is already at the resolution of `x`.

use mtau_tensor::{
    conv2d_backward, conv2d_forward, relu, relu_backward, scale_by_map, scale_by_map_backward, sigmoid,
    sigmoid_backward, Conv2dCtx, Scalar, Tensor,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AttentionGateParams<'a, T = f32> {
    /// `[inter, g_channels, 1, 1]`
    pub wg_weight: &'a Tensor<T>,
    pub wg_bias: &'a Tensor<T>,
    /// `[inter, x_channels, 1, 1]`, no bias.
    pub wx_weight: &'a Tensor<T>,
    /// `[1, inter, 1, 1]`
    pub psi_weight: &'a Tensor<T>,
    pub psi_bias: &'a Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct GateCache<T = f32> {
    wg: Conv2dCtx<T>,
    wx: Conv2dCtx<T>,
    hidden: Tensor<T>,
    psi: Conv2dCtx<T>,
    alpha: Tensor<T>,
    x: Tensor<T>,
}

impl<T: Scalar> GateCache<T> {
    /// The attention coefficients `alpha`, shaped `[n, 1, h, w]`.
    pub fn alpha(&self) -> &Tensor<T> {
        &self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct GateGrads<T = f32> {
    pub g: Tensor<T>,
    pub x: Tensor<T>,
    pub wg_weight: Tensor<T>,
    pub wg_bias: Tensor<T>,
    pub wx_weight: Tensor<T>,
    pub psi_weight: Tensor<T>,
    pub psi_bias: Tensor<T>,
}

pub fn attention_gate<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    params: AttentionGateParams<'_, T>,
) -> Result<(Tensor<T>, GateCache<T>)> {
    let (gn, _, gh, gw) = g.dims4()?;
    let (xn, _, xh, xw) = x.dims4()?;
    if (gn, gh, gw) != (xn, xh, xw) {
        return Err(Error::ExtentMismatch {
            op: "attention_gate",
            left: g.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let inter = params.wg_weight.shape()[0];
    if params.wx_weight.shape()[0] != inter {
        return Err(Error::Config(format!(
            "gate projections disagree on width: Wg {} vs Wx {}",
            inter,
            params.wx_weight.shape()[0]
        )));
    }
    let no_bias = Tensor::zeros(&[inter])?;
    let (proj_g, wg) = conv2d_forward(g, params.wg_weight, params.wg_bias, 1, 0)?;
    let (proj_x, wx) = conv2d_forward(x, params.wx_weight, &no_bias, 1, 0)?;
    let hidden = relu(&proj_g.add(&proj_x)?);
    let (logits, psi) = conv2d_forward(&hidden, params.psi_weight, params.psi_bias, 1, 0)?;
    let alpha = sigmoid(&logits);
    let out = scale_by_map(x, &alpha)?;
    Ok((out, GateCache { wg, wx, hidden, psi, alpha, x: x.clone() }))
}

pub fn attention_gate_backward<T: Scalar>(cache: &GateCache<T>, output_grad: &Tensor<T>) -> Result<GateGrads<T>> {
    let (mut dx, dalpha) = scale_by_map_backward(&cache.x, &cache.alpha, output_grad)?;
    let dlogits = sigmoid_backward(&cache.alpha, &dalpha)?;
    let mut psi = conv2d_backward(&cache.psi, &dlogits)?;
    let dpre = relu_backward(&cache.hidden, &psi.input_grad)?;
    let mut wg = conv2d_backward(&cache.wg, &dpre)?;
    let mut wx = conv2d_backward(&cache.wx, &dpre)?;
    dx.add_assign(&wx.input_grad)?;
    let take = |grads: &mut mtau_tensor::LayerGrads<T>, name: &str| {
        grads.take(name).ok_or_else(|| Error::Config(format!("conv backward lacks {name}")))
    };
    Ok(GateGrads {
        wg_weight: take(&mut wg, "weight")?,
        wg_bias: take(&mut wg, "bias")?,
        wx_weight: take(&mut wx, "weight")?,
        psi_weight: take(&mut psi, "weight")?,
        psi_bias: take(&mut psi, "bias")?,
        g: wg.input_grad,
        x: dx,
    })
}
