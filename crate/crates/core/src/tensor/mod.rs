//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! Values live in a [`Graph`]; every op appends a node and returns a [`Var`]
//! handle. [`Graph::backward`] walks the tape in reverse creation order, which
//! is a valid topological order because nodes can only reference earlier nodes.
//!
//! The engine is generic over [`Scalar`]: training runs in `f32`, while the
//! gradient-check suite runs the identical code paths in `f64`.

mod checkpoint;
mod conv;
mod graph;
mod param;

pub use checkpoint::{load_checkpoint, save_checkpoint, weights_digest, CheckpointEntry, MANIFEST_FILE, WEIGHTS_FILE};
pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, RoiTaps, Var};
pub use param::{sgd_step, Bound, ParamId, ParamStore, Parameter, SgdConfig};

use num_traits::Float;
use std::fmt::Debug;
use std::ops::AddAssign;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid argument in {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating-point element type of a tensor.
pub trait Scalar: Float + Default + Debug + Send + Sync + AddAssign + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha·A·B + beta·C` for an `m×k` by `k×n` product with explicit
    /// row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

/// Bounds-checked `C[m×n] = A·B + beta·C`, `C` row-major with leading dimension `ldc`.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for row in 0..m {
            for v in &mut c[row * ldc..row * ldc + n] {
                *v = *v * beta;
            }
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len(), "gemm: A out of bounds");
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len(), "gemm: B out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm: C out of bounds");
    // SAFETY: bounds asserted above; matrixmultiply reads/writes only inside them.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::Shape { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_operand() {
        // A = [[1,2],[3,4]], B^T stored row-major as [[5,6],[7,8]] so B = [[5,7],[6,8]]
        let a = [1.0f64, 2., 3., 4.];
        let bt = [5.0f64, 6., 7., 8.];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, Mat { data: &a, rs: 2, cs: 1 }, Mat { data: &bt, rs: 1, cs: 2 }, 0.0, &mut c, 2);
        assert_eq!(c, [17., 23., 39., 53.]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4]).is_err());
        assert_eq!(Tensor::scalar(2.0f32).numel(), 1);
    }
}
