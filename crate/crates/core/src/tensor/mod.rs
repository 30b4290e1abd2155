//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Tensors are generic over the element type. Models train in `f32`; the
//! same graph code runs in `f64` when finite-difference gradient checks need
//! headroom below single-precision rounding.

mod gradcheck;
mod graph;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use gradcheck::{check_all_ops, finite_diff_check, GradCheckReport};
pub use graph::{Graph, SparseRow, Var};

use crate::error::{invalid, Result};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// The strided views must lie inside the allocations they point to.
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

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    data: &'a [S],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    /// Row-major `rows x cols` view.
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix view size");
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `C (row-major m x n) = alpha * A * B + beta * C`.
pub(crate) fn gemm<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, c: &mut [S], alpha: S, beta: S) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every view was constructed from a slice whose length matches
    // its logical shape, and `c` is an exclusive m*n row-major buffer.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major dense tensor. The last dimension is the column dimension; all
/// leading dimensions fold into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid("tensor shape must have at least one dimension"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub(crate) fn mat(&self) -> MatRef<'_, S> {
        MatRef::new(&self.data, self.rows(), self.cols())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of one row, accumulated in `f64`.
pub fn softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Row log-softmax in `f64`.
pub fn log_softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|v| v.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]]
        let a = [1.0f32, 2., 3., 4., 5., 6.];
        let am = MatRef::new(&a, 2, 3);
        let mut c = [0.0f32; 4];
        gemm(am, am.t(), &mut c, 1.0, 0.0);
        assert_eq!(c, [14., 32., 32., 77.]);
        let mut c = [0.0f32; 9];
        gemm(am.t(), am, &mut c, 1.0, 0.0);
        assert_eq!(c, [17., 22., 27., 22., 29., 36., 27., 36., 45.]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 2, 3], vec![0.0; 12]).unwrap();
        assert_eq!((t.rows(), t.cols()), (4, 3));
    }

    #[test]
    fn softmax_helpers_agree() {
        let z = [1.0f32, -2.0, 0.5, 3.0];
        let p = softmax_f64(&z);
        let lp = log_softmax_f64(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a - b.exp()).abs() < 1e-12);
        }
    }
}
