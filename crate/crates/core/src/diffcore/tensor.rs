//! Dense row-major tensors and the matrix products everything else runs on.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Shape plus row-major 64-bit float storage. The universal numeric carrier:
/// vectors are shape `[n]`, matrices `[rows, cols]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `data` has exactly `shape.product()` values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CoreError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CoreError::LengthMismatch {
                context: "Tensor::new",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from row-major data; panics on a size mismatch, so callers
    /// constructing from untrusted sizes should go through [`Tensor::new`].
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data size mismatch");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, CoreError> {
        if self.ndim() != 2 || rhs.ndim() != 2 {
            return Err(CoreError::contract("matmul requires 2-D tensors"));
        }
        if self.cols() != rhs.rows() {
            return Err(CoreError::LengthMismatch {
                context: "matmul inner dimension",
                expected: self.cols(),
                actual: rhs.rows(),
            });
        }
        Ok(gemm(false, false, self, rhs))
    }

    /// Split a 2-D tensor's columns at `k`: ([n, k], [n, cols−k]).
    pub fn split_cols(&self, k: usize) -> (Tensor, Tensor) {
        let (n, c) = (self.rows(), self.cols());
        assert!(k <= c, "split_cols past width");
        let mut left = Tensor::zeros(vec![n, k]);
        let mut right = Tensor::zeros(vec![n, c - k]);
        for i in 0..n {
            let row = self.row(i);
            left.row_mut(i).copy_from_slice(&row[..k]);
            right.row_mut(i).copy_from_slice(&row[k..]);
        }
        (left, right)
    }

    /// Gather rows of a 2-D tensor by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Tensor::zeros(vec![idx.len(), c]);
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }

    /// Horizontally concatenate two 2-D tensors with equal row counts.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
        let n = a.rows();
        assert_eq!(n, b.rows(), "concat_cols row mismatch");
        let (ca, cb) = (a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![n, ca + cb]);
        for i in 0..n {
            out.row_mut(i)[..ca].copy_from_slice(a.row(i));
            out.row_mut(i)[ca..].copy_from_slice(b.row(i));
        }
        out
    }

    /// Transposed copy of a 2-D tensor.
    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// `op(A) · op(B)` where `op` is an optional transpose, without materializing
/// the transposed matrix. Inputs must be 2-D with compatible inner dimensions.
pub(crate) fn gemm(trans_a: bool, trans_b: bool, a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (kb, n) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");

    // Row-major strides, swapped when the operand is used transposed.
    let (rsa, csa) = if trans_a {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };

    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}
