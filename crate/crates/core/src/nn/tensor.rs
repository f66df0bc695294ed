//! Dense row-major tensors, the sole currency of the layer kernel.
//!
//! Activations and parameters are `f32` in normal operation; every layer is
//! generic over [`Scalar`] so gradient checks can run the identical code in
//! `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for training/inference, `f64` for checks.
pub trait Scalar:
    num_traits::Float + ndarray::LinalgScalar + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// An n-dimensional array with contiguous row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor from existing data; the element count must match.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", "element count", expected, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterprets the storage under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape("reshape", "element count", expected, self.data.len()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element access for tests and small-scale code; row-major order.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
        }
    }

    /// In-place elementwise `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }
}

/// Whether a matrix product may fan out over worker threads.
///
/// Every split is over disjoint rows or columns of the output, so each output
/// element is accumulated in the same order either way; results are
/// bit-identical to the serial product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatmulPar {
    Serial,
    Parallel,
}

const PAR_MIN_FLOPS: usize = 1 << 22;
const PAR_MIN_ROWS_PER_CHUNK: usize = 8;
const PAR_MIN_COLS_PER_CHUNK: usize = 64;

fn par_chunks(total: usize, min_chunk: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    (total.div_ceil(threads)).max(min_chunk)
}

/// `out = a @ b` for row-major slices: a is `m x k`, b is `k x n`.
pub fn matmul_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    par: MatmulPar,
) {
    let a = ArrayView2::from_shape((m, k), a).expect("matmul_nn: lhs size");
    let b = ArrayView2::from_shape((k, n), b).expect("matmul_nn: rhs size");
    let out = ArrayViewMut2::from_shape((m, n), out).expect("matmul_nn: out size");
    gemm(a, b, out, par);
}

/// `out = a^T @ b`: a is `k x m` row-major, b is `k x n`; out is `m x n`.
pub fn matmul_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    par: MatmulPar,
) {
    let a = ArrayView2::from_shape((k, m), a).expect("matmul_tn: lhs size");
    let b = ArrayView2::from_shape((k, n), b).expect("matmul_tn: rhs size");
    let out = ArrayViewMut2::from_shape((m, n), out).expect("matmul_tn: out size");
    gemm(a.reversed_axes(), b, out, par);
}

/// `out = a @ b^T`: a is `m x k`, b is `n x k` row-major; out is `m x n`.
pub fn matmul_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
    par: MatmulPar,
) {
    let a = ArrayView2::from_shape((m, k), a).expect("matmul_nt: lhs size");
    let b = ArrayView2::from_shape((n, k), b).expect("matmul_nt: rhs size");
    let out = ArrayViewMut2::from_shape((m, n), out).expect("matmul_nt: out size");
    gemm(a, b.reversed_axes(), out, par);
}

fn gemm<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, mut out: ArrayViewMut2<T>, par: MatmulPar) {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let flops = 2 * m * k * n;
    let threads = rayon::current_num_threads();
    if par == MatmulPar::Serial || threads <= 1 || flops < PAR_MIN_FLOPS {
        general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
        return;
    }
    if m >= 2 * PAR_MIN_ROWS_PER_CHUNK {
        // Split over output rows.
        let chunk = par_chunks(m, PAR_MIN_ROWS_PER_CHUNK);
        a.axis_chunks_iter(Axis(0), chunk)
            .zip(out.axis_chunks_iter_mut(Axis(0), chunk))
            .par_bridge()
            .for_each(|(a_c, mut out_c)| {
                general_mat_mul(T::one(), &a_c, &b, T::zero(), &mut out_c);
            });
    } else if n >= 2 * PAR_MIN_COLS_PER_CHUNK {
        // Short-and-wide product: split over output columns instead.
        let chunk = par_chunks(n, PAR_MIN_COLS_PER_CHUNK);
        b.axis_chunks_iter(Axis(1), chunk)
            .zip(out.axis_chunks_iter_mut(Axis(1), chunk))
            .par_bridge()
            .for_each(|(b_c, mut out_c)| {
                general_mat_mul(T::one(), &a, &b_c, T::zero(), &mut out_c);
            });
    } else {
        general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (1u64 << 31) as f64 - 1.0
        };
        let (m, k, n) = (7, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let want = naive_matmul(m, k, n, &a, &b);

        let mut got = vec![0.0; m * n];
        matmul_nn(m, k, n, &a, &b, &mut got, MatmulPar::Serial);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // a^T stored as k x m
        let mut a_t = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        let mut got_tn = vec![0.0; m * n];
        matmul_tn(m, k, n, &a_t, &b, &mut got_tn, MatmulPar::Parallel);
        for (g, w) in got_tn.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        // b^T stored as n x k
        let mut b_t = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let mut got_nt = vec![0.0; m * n];
        matmul_nt(m, k, n, &a, &b_t, &mut got_nt, MatmulPar::Parallel);
        for (g, w) in got_nt.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
