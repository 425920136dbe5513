use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its forward *output*.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    output_grad.zip_map(output, "relu_backward", |g, y| if y > T::zero() { g } else { T::zero() })
}

/// Logistic function, clamped so that every output lies strictly inside (0, 1)
/// at the working precision.
pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    input.map(|x| {
        let y = if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        };
        y.max(lo).min(hi)
    })
}

/// Gradient of [`sigmoid`] given its forward *output*.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
    output_grad.zip_map(output, "sigmoid_backward", |g, y| g * y * (T::one() - y))
}

/// Concatenates two rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            expected: vec![n, cb, h, w],
            actual: b.shape().to_vec(),
        });
    }
    let (ia, ib) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (ia + ib));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ia..(s + 1) * ia]);
        out.extend_from_slice(&b.data()[s * ib..(s + 1) * ib]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

/// Inverse of [`concat_channels`]: splits off the first `first` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.dims4()?;
    if first == 0 || first >= c {
        return Err(TensorError::InvalidArgument {
            op: "split_channels",
            reason: format!("cannot split {c} channels at {first}"),
        });
    }
    let (ia, ib) = (first * h * w, (c - first) * h * w);
    let mut a = Vec::with_capacity(n * ia);
    let mut b = Vec::with_capacity(n * ib);
    for s in 0..n {
        let item = &t.data()[s * (ia + ib)..(s + 1) * (ia + ib)];
        a.extend_from_slice(&item[..ia]);
        b.extend_from_slice(&item[ia..]);
    }
    Ok((
        Tensor::from_parts(vec![n, first, h, w], a),
        Tensor::from_parts(vec![n, c - first, h, w], b),
    ))
}

/// `x * alpha` with a single-channel `alpha` broadcast over the channels of `x`.
pub fn scale_by_map<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    alpha.expect_shape("scale_by_map", &[n, 1, h, w])?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for s in 0..n {
        let a = &alpha.data()[s * plane..(s + 1) * plane];
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for (v, &m) in out[base..base + plane].iter_mut().zip(a) {
                *v = *v * m;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradients of [`scale_by_map`] with respect to `x` and `alpha`.
pub fn scale_by_map_backward<T: Scalar>(
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    output_grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    output_grad.expect_shape("scale_by_map_backward", x.shape())?;
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let dx = scale_by_map(output_grad, alpha)?;
    let mut dalpha = vec![0.0f64; n * plane];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let xs = &x.data()[base..base + plane];
            let gs = &output_grad.data()[base..base + plane];
            for (i, (xv, gv)) in xs.iter().zip(gs).enumerate() {
                dalpha[s * plane + i] += xv.as_f64() * gv.as_f64();
            }
        }
    }
    Ok((
        dx,
        Tensor::from_parts(vec![n, 1, h, w], dalpha.into_iter().map(T::from_f64_lossy).collect()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::new(&[2], vec![-2.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_values_and_range() {
        let x = Tensor::<f32>::new(&[5], vec![0.0, 200.0, -200.0, 30.0, -30.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_derivative_matches_finite_differences() {
        let h = 1e-6;
        for i in 0..=100 {
            let x = -5.0 + 0.1 * i as f64;
            let t = Tensor::<f64>::new(&[1], vec![x]).unwrap();
            let y = sigmoid(&t);
            let analytic = sigmoid_backward(&y, &Tensor::full(&[1], 1.0).unwrap()).unwrap().data()[0];
            let plus = sigmoid(&Tensor::new(&[1], vec![x + h]).unwrap()).data()[0];
            let minus = sigmoid(&Tensor::new(&[1], vec![x - h]).unwrap()).data()[0];
            let numeric = (plus - minus) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-4, "x={x}");
        }
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = random_tensor::<f32>(&[2, 3, 2, 2], 1);
        let b = random_tensor::<f32>(&[2, 1, 2, 2], 2);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let (a2, b2) = split_channels(&cat, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn scale_by_map_backward_is_consistent() {
        let x = random_tensor::<f64>(&[2, 3, 2, 3], 1);
        let alpha = random_tensor::<f64>(&[2, 1, 2, 3], 2);
        let g = random_tensor::<f64>(&[2, 3, 2, 3], 3);
        let (dx, da) = scale_by_map_backward(&x, &alpha, &g).unwrap();
        // <d(x*a), g> is bilinear, so the directional derivatives are exact.
        let base = scale_by_map(&x, &alpha).unwrap().dot_f64(&g).unwrap();
        let x2 = x.add(&Tensor::full(x.shape(), 1.0).unwrap()).unwrap();
        let moved = scale_by_map(&x2, &alpha).unwrap().dot_f64(&g).unwrap();
        assert!((moved - base - dx.sum_f64()).abs() < 1e-10);
        let a2 = alpha.add(&Tensor::full(alpha.shape(), 1.0).unwrap()).unwrap();
        let moved = scale_by_map(&x, &a2).unwrap().dot_f64(&g).unwrap();
        assert!((moved - base - da.sum_f64()).abs() < 1e-10);
    }
}
