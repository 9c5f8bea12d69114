//! Dense row-major `f64` tensors and the matrix kernels behind the autodiff graph.
//!
//! Dense products go through a blocked single-threaded GEMM, so results are
//! bit-identical from run to run for a given shape.

use serde::{Deserialize, Serialize};

use crate::error::{CenetError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CenetError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows × cols]` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(CenetError::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CenetError::NotScalar(self.shape.clone()))
        }
    }

    /// `(rows, cols)` view: a vector `[n]` is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Splits a `[batch × Σdᵢ]` matrix back into column blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let (rows, cols) = self.dims2();
        if widths.iter().sum::<usize>() != cols {
            return Err(CenetError::shape("split_cols", &self.shape, widths));
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            let mut data = Vec::with_capacity(rows * w);
            for i in 0..rows {
                data.extend_from_slice(&self.row(i)[offset..offset + w]);
            }
            out.push(Tensor {
                shape: vec![rows, w],
                data,
            });
            offset += w;
        }
        Ok(out)
    }
}

/// Compressed sparse rows holding non-negative counts, used as a constant
/// input to the graph (the frequency feature never needs densifying).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(cols: usize) -> Self {
        SparseRows {
            cols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a row given as `(column, value)` pairs.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) -> Result<()> {
        for (col, value) in entries {
            if col >= self.cols {
                return Err(CenetError::IdOutOfRange {
                    kind: "column",
                    id: col as u64,
                    limit: self.cols as u64,
                });
            }
            self.indices.push(col);
            self.values.push(value);
        }
        self.indptr.push(self.indices.len());
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows(), self.cols]);
        for i in 0..self.rows() {
            for (j, v) in self.row(i) {
                out.data[i * self.cols + j] += v;
            }
        }
        out
    }
}

/// Dot product with four independent accumulators, reduced in a fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `C = A · B` where `A` is `[n×m]` and `B` is `[m×k]`, each addressed by
/// explicit row and column strides so transposes need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    m: usize,
    k: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    if n == 0 || k == 0 || m == 0 {
        return out;
    }
    debug_assert!(a.len() >= n * m && b.len() >= m * k);
    // SAFETY: the strides describe matrices lying entirely inside `a`, `b`
    // and `out`, whose lengths are checked above and by the callers.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    out
}

/// `C = A · Bᵀ` with `A: [n×k]`, `B: [m×k]`.
pub(crate) fn matmul_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    gemm(n, k, m, a, k, 1, b, 1, k)
}

/// `C = A · B` with `A: [n×m]`, `B: [m×k]`.
pub(crate) fn matmul_nn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    gemm(n, m, k, a, m, 1, b, k, 1)
}

/// `C = Aᵀ · B` with `A: [n×m]`, `B: [n×k]`, giving `[m×k]`.
pub(crate) fn matmul_tn(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    gemm(m, n, k, a, 1, m, b, k, 1)
}

/// Numerically stable softmax of one row.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(CenetError::EmptyInput("softmax"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(4.0);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 4.0);
        assert!(Tensor::vector(vec![1.0, 2.0]).item().is_err());
    }

    #[test]
    fn kernels_agree_with_each_other() {
        // A [2×3], B [4×3]
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 2.0];
        let b = [
            0.5, 1.0, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0, -2.0, 3.0, 0.25,
        ];
        let c = matmul_nt(&a, 2, 3, &b, 4);
        // transpose B to [3×4] and use nn
        let mut bt = vec![0.0; 12];
        for j in 0..4 {
            for k in 0..3 {
                bt[k * 4 + j] = b[j * 3 + k];
            }
        }
        assert_eq!(c, matmul_nn(&a, 2, 3, &bt, 4));
        // Aᵀ·C where A is [2×3] and C is [2×4]
        let t = matmul_tn(&a, 2, 3, &c, 4);
        let mut expect = vec![0.0; 12];
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    expect[j * 4 + k] += a[i * 3 + j] * c[i * 4 + k];
                }
            }
        }
        for (x, y) in t.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn split_cols_inverts_layout() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let parts = t.split_cols(&[1, 2]).unwrap();
        assert_eq!(parts[0].data(), &[1.0, 4.0]);
        assert_eq!(parts[1].data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
