//! Dense rank-≤4 tensors and a minimal reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiable
//! computation happens on a [`Tape`]: registering a tensor yields a [`Var`]
//! handle, tape methods record operations while computing values eagerly,
//! and [`Tape::backward`] replays the record in reverse, accumulating
//! gradients for every node.
//!
//! The engine is generic over the scalar: `f32` is the runtime mode,
//! `f64` the verification mode used by [`gradcheck`].

mod tape;

pub mod gradcheck;

pub use tape::{Tape, Var};

use crate::{Error, Result};

/// Scalar precision of a graph. All tensors on one tape share one mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarMode {
    /// f32 — training and attack runtime.
    Single,
    /// f64 — gradient verification.
    Double,
}

/// Floating-point scalar the engine is instantiated with.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const MODE: ScalarMode;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const MODE: ScalarMode = ScalarMode::Single;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const MODE: ScalarMode = ScalarMode::Double;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

/// Dense row-major array of rank ≤ 4. Shape `[]` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank {} exceeds maximum {MAX_RANK}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).expect("filled: invalid shape")
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Builds a [C,H,W] tensor from nested rows of a single channel.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let h = rows.len();
        let w = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == w), "ragged rows");
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Tensor::new(&[1, h, w], data).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Same data under a new shape with equal element count (for example
    /// lifting an [H,W] raster to the [1,H,W] form the network expects).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Flat index into a [C,H,W] tensor.
#[inline]
pub fn idx3(h: usize, w: usize, c: usize, y: usize, x: usize) -> usize {
    (c * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[1, 2, 3, 4, 5], vec![0.0; 120]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.0f64);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.0);
    }

    #[test]
    fn from_rows_is_row_major() {
        let t = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]);
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
