//! Strided 2D convolution and its adjoint (transposed convolution).
//!
//! Both lower to one GEMM per batch item through an im2col buffer. The
//! column buffer is rebuilt in the backward pass instead of being kept in
//! the context, so a context only holds the forward input and kernel.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::LayerGrads;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(src: &[T], g: &Geometry, dst: &mut [T]) {
    let cols = g.cols();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let out = &mut dst[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    let line = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto an image (adjoint of `im2col`).
fn col2im<T: Scalar>(cols_buf: &[T], g: &Geometry, dst: &mut [T]) {
    let cols = g.cols();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] =
                                plane[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a strided convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Saved state of a [`conv2d_forward`] call.
#[derive(Debug, Clone)]
pub struct Conv2dCtx<T = f32> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    stride: usize,
    padding: usize,
    out_shape: Vec<usize>,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![cout, cin, kh, kw],
            actual: kernel.shape().to_vec(),
        });
    }
    bias.expect_shape("conv2d bias", &[cout])?;
    let (out_h, out_w) = match (
        conv_output_extent(h, kh, stride, padding),
        conv_output_extent(w, kw, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "kernel {kh}x{kw} with stride {stride} and padding {padding} does not fit input {h}x{w}"
                ),
            })
        }
    };
    let g = Geometry { channels: cin, height: h, width: w, kh, kw, stride, padding, out_h, out_w };
    Ok((n, cout, g))
}

/// Cross-correlation with zero padding, as in every deep-learning framework.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Conv2dCtx<T>)> {
    let (n, cout, g) = conv_geometry(input, kernel, bias, stride, padding)?;
    let in_item = g.channels * g.height * g.width;
    let out_item = cout * g.cols();
    let mut out = vec![T::zero(); n * out_item];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.rows() * g.cols()] };
    let k = MatRef::new(kernel.data(), cout, g.rows());
    for b in 0..n {
        let src = &input.data()[b * in_item..(b + 1) * in_item];
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for (co, chunk) in dst.chunks_mut(g.cols()).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let col_ref = if g.is_pointwise() {
            MatRef::new(src, g.rows(), g.cols())
        } else {
            im2col(src, &g, &mut cols);
            MatRef::new(&cols, g.rows(), g.cols())
        };
        gemm(k, col_ref, T::one(), dst);
    }
    let out_shape = vec![n, cout, g.out_h, g.out_w];
    let ctx = Conv2dCtx {
        input: input.clone(),
        kernel: kernel.clone(),
        stride,
        padding,
        out_shape: out_shape.clone(),
    };
    Ok((Tensor::from_parts(out_shape, out), ctx))
}

fn sum_per_channel<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad.dims4()?;
    let plane = h * w;
    let sums = (0..c)
        .map(|ch| {
            let mut acc = 0.0f64;
            for b in 0..n {
                let start = (b * c + ch) * plane;
                acc += grad.data()[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::from_f64_lossy(acc)
        })
        .collect();
    Ok(Tensor::from_parts(vec![c], sums))
}

pub fn conv2d_backward<T: Scalar>(ctx: &Conv2dCtx<T>, output_grad: &Tensor<T>) -> Result<LayerGrads<T>> {
    if output_grad.shape() != ctx.out_shape.as_slice() {
        return Err(TensorError::StaleContext {
            op: "conv2d_backward",
            expected: ctx.out_shape.clone(),
            actual: output_grad.shape().to_vec(),
        });
    }
    let (n, cin, h, w) = ctx.input.dims4()?;
    let (cout, _, kh, kw) = ctx.kernel.dims4()?;
    let (out_h, out_w) = (ctx.out_shape[2], ctx.out_shape[3]);
    let g = Geometry {
        channels: cin,
        height: h,
        width: w,
        kh,
        kw,
        stride: ctx.stride,
        padding: ctx.padding,
        out_h,
        out_w,
    };
    let in_item = cin * h * w;
    let out_item = cout * g.cols();
    let mut input_grad = vec![T::zero(); n * in_item];
    let mut kernel_grad = vec![T::zero(); ctx.kernel.len()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.rows() * g.cols()] };
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    let k = MatRef::new(ctx.kernel.data(), cout, g.rows());
    for b in 0..n {
        let src = &ctx.input.data()[b * in_item..(b + 1) * in_item];
        let dy = MatRef::new(&output_grad.data()[b * out_item..(b + 1) * out_item], cout, g.cols());
        let col_ref = if g.is_pointwise() {
            MatRef::new(src, g.rows(), g.cols())
        } else {
            im2col(src, &g, &mut cols);
            MatRef::new(&cols, g.rows(), g.cols())
        };
        gemm(dy, col_ref.t(), T::one(), &mut kernel_grad);
        let dst = &mut input_grad[b * in_item..(b + 1) * in_item];
        if g.is_pointwise() {
            gemm(k.t(), dy, T::zero(), dst);
        } else {
            gemm(k.t(), dy, T::zero(), &mut dcols);
            col2im(&dcols, &g, dst);
        }
    }
    Ok(LayerGrads {
        input_grad: Tensor::from_parts(ctx.input.shape().to_vec(), input_grad),
        param_grads: vec![
            ("weight", Tensor::from_parts(ctx.kernel.shape().to_vec(), kernel_grad)),
            ("bias", sum_per_channel(output_grad)?),
        ],
    })
}

/// Saved state of a [`transposed_conv2d_forward`] call.
#[derive(Debug, Clone)]
pub struct TransposedConv2dCtx<T = f32> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    stride: usize,
    out_shape: Vec<usize>,
}

/// Adjoint of a strided, unpadded convolution.
///
/// The kernel is laid out `[in_channels, out_channels, kh, kw]`; the output
/// extent is `(h - 1) * stride + kh`, so a 2x2 kernel at stride 2 doubles the
/// spatial size.
pub fn transposed_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, TransposedConv2dCtx<T>)> {
    let (n, cin, h, w) = input.dims4()?;
    let (kcin, cout, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "transposed_conv2d",
            expected: vec![cin, cout, kh, kw],
            actual: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "transposed_conv2d",
            reason: "stride must be positive".into(),
        });
    }
    bias.expect_shape("transposed_conv2d bias", &[cout])?;
    let (out_h, out_w) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    // Geometry of the forward convolution this operator is the adjoint of.
    let g = Geometry {
        channels: cout,
        height: out_h,
        width: out_w,
        kh,
        kw,
        stride,
        padding: 0,
        out_h: h,
        out_w: w,
    };
    let in_item = cin * h * w;
    let out_item = cout * out_h * out_w;
    let mut out = vec![T::zero(); n * out_item];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let k = MatRef::new(kernel.data(), cin, g.rows());
    for b in 0..n {
        let x = MatRef::new(&input.data()[b * in_item..(b + 1) * in_item], cin, h * w);
        gemm(k.t(), x, T::zero(), &mut cols);
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for (co, chunk) in dst.chunks_mut(out_h * out_w).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        col2im(&cols, &g, dst);
    }
    let out_shape = vec![n, cout, out_h, out_w];
    let ctx = TransposedConv2dCtx {
        input: input.clone(),
        kernel: kernel.clone(),
        stride,
        out_shape: out_shape.clone(),
    };
    Ok((Tensor::from_parts(out_shape, out), ctx))
}

pub fn transposed_conv2d_backward<T: Scalar>(
    ctx: &TransposedConv2dCtx<T>,
    output_grad: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    if output_grad.shape() != ctx.out_shape.as_slice() {
        return Err(TensorError::StaleContext {
            op: "transposed_conv2d_backward",
            expected: ctx.out_shape.clone(),
            actual: output_grad.shape().to_vec(),
        });
    }
    let (n, cin, h, w) = ctx.input.dims4()?;
    let (_, cout, kh, kw) = ctx.kernel.dims4()?;
    let (out_h, out_w) = (ctx.out_shape[2], ctx.out_shape[3]);
    let g = Geometry {
        channels: cout,
        height: out_h,
        width: out_w,
        kh,
        kw,
        stride: ctx.stride,
        padding: 0,
        out_h: h,
        out_w: w,
    };
    let in_item = cin * h * w;
    let out_item = cout * out_h * out_w;
    let mut input_grad = vec![T::zero(); n * in_item];
    let mut kernel_grad = vec![T::zero(); ctx.kernel.len()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let k = MatRef::new(ctx.kernel.data(), cin, g.rows());
    for b in 0..n {
        im2col(&output_grad.data()[b * out_item..(b + 1) * out_item], &g, &mut cols);
        let cols_ref = MatRef::new(&cols, g.rows(), g.cols());
        gemm(k, cols_ref, T::zero(), &mut input_grad[b * in_item..(b + 1) * in_item]);
        let x = MatRef::new(&ctx.input.data()[b * in_item..(b + 1) * in_item], cin, h * w);
        gemm(x, cols_ref.t(), T::one(), &mut kernel_grad);
    }
    Ok(LayerGrads {
        input_grad: Tensor::from_parts(ctx.input.shape().to_vec(), input_grad),
        param_grads: vec![
            ("weight", Tensor::from_parts(ctx.kernel.shape().to_vec(), kernel_grad)),
            ("bias", sum_per_channel(output_grad)?),
        ],
    })
}
