//! Finite-difference verification of analytic gradients.
//!
//! A layer under test is viewed as a map from a list of argument tensors
//! (input first, then parameters) to one output tensor. The scalar objective
//! is `<forward(args), R>` for a fixed random projection `R`, so one backward
//! call with `R` as the output gradient yields every analytic partial.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub trait Differentiable {
    fn forward(&self, args: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Gradients of `<forward(args), output_grad>` for every argument, in order.
    fn backward(&self, args: &[Tensor<f64>], output_grad: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

/// Adapts a pair of closures to [`Differentiable`].
pub struct FnLayer<F, B> {
    forward: F,
    backward: B,
}

impl<F, B> FnLayer<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    pub fn new(forward: F, backward: B) -> Self {
        Self { forward, backward }
    }
}

impl<F, B> Differentiable for FnLayer<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    fn forward(&self, args: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        (self.forward)(args)
    }

    fn backward(&self, args: &[Tensor<f64>], output_grad: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        (self.backward)(args, output_grad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Base step `h` of the five-point central stencil.
    pub step: f64,
    /// Seed for the output projection.
    pub seed: u64,
    /// Check at most this many (evenly strided) entries per argument.
    pub max_entries_per_arg: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, seed: 0x5eed, max_entries_per_arg: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(argument index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn objective<L: Differentiable + ?Sized>(layer: &L, args: &[Tensor<f64>], projection: &Tensor<f64>) -> Result<f64> {
    layer.forward(args)?.dot_f64(projection)
}

/// Compares `layer.backward` against central finite differences of the
/// projected objective over every (or every sampled) argument entry.
pub fn grad_check<L: Differentiable + ?Sized>(
    layer: &L,
    args: &[Tensor<f64>],
    config: GradCheckConfig,
) -> Result<GradCheckReport> {
    let out = layer.forward(args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let projection = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0))?;
    let analytic = layer.backward(args, &projection)?;
    if analytic.len() != args.len() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("backward returned {} gradients for {} arguments", analytic.len(), args.len()),
        });
    }

    let h = config.step;
    let mut work: Vec<Tensor<f64>> = args.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0 };
    for (ai, grad) in analytic.iter().enumerate() {
        grad.expect_shape("grad_check", args[ai].shape())?;
        let len = args[ai].len();
        let stride = match config.max_entries_per_arg {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        for ei in (0..len).step_by(stride) {
            let original = args[ai].data()[ei];
            let mut eval = |offset: f64| -> Result<f64> {
                work[ai].data_mut()[ei] = original + offset;
                objective(layer, &work, &projection)
            };
            let (p1, m1, p2, m2) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
            work[ai].data_mut()[ei] = original;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let err = relative_error(grad.data()[ei], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((ai, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let square = FnLayer::new(
            |a: &[Tensor<f64>]| Ok(a[0].map(|v| v * v)),
            |a: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![a[0].mul(g)?]), // missing factor 2
        );
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(&square, &[x], GradCheckConfig::default()).unwrap();
        assert!(report.max_relative_error > 0.4);
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let cube = FnLayer::new(
            |a: &[Tensor<f64>]| Ok(a[0].map(|v| v * v * v)),
            |a: &[Tensor<f64>], g: &Tensor<f64>| Ok(vec![a[0].map(|v| 3.0 * v * v).mul(g)?]),
        );
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(&cube, &[x], GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-8), "{report:?}");
        assert_eq!(report.checked, 3);
    }
}
