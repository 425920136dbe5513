use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat input indices of the selected maximum for each pooled cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2.
///
/// Ties resolve to the first position in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatial { op: "maxpool2d", height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, c, oh, ow], out),
        PoolIndices { input_shape: input.shape().to_vec(), argmax },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(indices: &PoolIndices, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    if output_grad.len() != indices.argmax.len() {
        return Err(TensorError::StaleContext {
            op: "maxpool2d_backward",
            expected: vec![indices.argmax.len()],
            actual: output_grad.shape().to_vec(),
        });
    }
    let mut grad = vec![T::zero(); indices.input_shape.iter().product()];
    for (&idx, &g) in indices.argmax.iter().zip(output_grad.data()) {
        grad[idx] = grad[idx] + g;
    }
    Ok(Tensor::from_parts(indices.input_shape.clone(), grad))
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub fn upsample2x_backward<T: Scalar>(output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = output_grad.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(TensorError::OddSpatial { op: "upsample2x_backward", height: oh, width: ow });
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &output_grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * ow + x];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn single_window() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax(), &[3]);
    }

    #[test]
    fn constant_input_picks_first_index() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 2.5).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert_eq!(idx.argmax(), &[0, 2, 8, 10]);
    }

    #[test]
    fn matches_naive_windowed_max() {
        let x = random_tensor::<f32>(&[1, 1, 4, 4], 9);
        let (y, _) = maxpool2d(&x).unwrap();
        let d = x.data();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(d[(2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(matches!(maxpool2d(&x), Err(TensorError::OddSpatial { .. })));
    }

    #[test]
    fn backward_routes_to_argmax_and_conserves_mass() {
        let x = random_tensor::<f64>(&[2, 3, 6, 4], 5);
        let (y, idx) = maxpool2d(&x).unwrap();
        let g = random_tensor::<f64>(y.shape(), 6);
        let dx = maxpool2d_backward(&idx, &g).unwrap();
        assert!((dx.sum_f64() - g.sum_f64()).abs() < 1e-12);
        let nonzero = dx.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, y.len());
        for (&i, &gv) in idx.argmax().iter().zip(g.data()) {
            assert_eq!(dx.data()[i], gv);
        }
    }

    #[test]
    fn upsample_duplicates_pixels() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = random_tensor::<f64>(&[2, 2, 3, 5], 1);
        let u = random_tensor::<f64>(&[2, 2, 6, 10], 2);
        let lhs = upsample2x(&x).unwrap().dot_f64(&u).unwrap();
        let rhs = x.dot_f64(&upsample2x_backward(&u).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
