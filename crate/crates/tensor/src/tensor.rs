use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1 to 4.
///
/// Rank-4 tensors follow the batch x channels x height x width convention.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Panics on an invalid shape; for shapes derived from validated tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 4 (batch, channels, height, width)".into(),
            }),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(op, other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape("add_assign", other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn dot_f64(&self, other: &Self) -> Result<f64> {
        self.expect_shape("dot", other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape("max_abs_diff", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Copy of batch items `[start, start + count)` of a rank-4 tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if count == 0 || start + count > n {
            return Err(TensorError::InvalidArgument {
                op: "batch_slice",
                reason: format!("range {start}..{} outside batch of {n}", start + count),
            });
        }
        let item = c * h * w;
        Ok(Self::from_parts(
            vec![count, c, h, w],
            self.data[start * item..(start + count) * item].to_vec(),
        ))
    }

    /// Stacks equally shaped rank-4 tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::EmptyBatch { op: "concat_batch" })?;
        let (_, c, h, w) = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    expected: vec![pn, c, h, w],
                    actual: p.shape.clone(),
                });
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(vec![n, c, h, w], data))
    }
}
