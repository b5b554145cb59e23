//! Row-major dense `f64` matrices and the handful of kernels the tape needs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::invalid(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::invalid(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LabError::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(LabError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        debug_assert_eq!(self.shape(), other.shape());
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Column means as a 1 x cols row.
    pub fn column_means(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(1, self.cols);
        if self.rows == 0 {
            return out;
        }
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.data.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Subtracts the column means from every row.
    pub fn center_columns(&self) -> DenseMatrix {
        let means = self.column_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(&means.data) {
                *v -= m;
            }
        }
        out
    }

    pub fn select_rows(&self, index: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, index: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, index.len(), |i, j| self.get(i, index[j]))
    }

    pub fn vstack(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(LabError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Horizontally concatenates matrices with equal row counts.
    pub fn hstack(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(LabError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, offset),
                    rhs: p.shape(),
                });
            }
            for i in 0..rows {
                out.row_mut(i)[offset..offset + p.cols].copy_from_slice(p.row(i));
            }
            offset += p.cols;
        }
        Ok(out)
    }
}

/// `out = op(a) * op(b) + beta * out`, where `op` optionally transposes.
pub(crate) fn gemm(
    a: &DenseMatrix,
    trans_a: bool,
    b: &DenseMatrix,
    trans_b: bool,
    out: &mut DenseMatrix,
    beta: f64,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(if trans_b { b.cols } else { b.rows }, k);
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides describe the row-major buffers whose extents were
    // checked above; `out` is disjoint from both inputs.
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
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Square-root-free Cholesky factorization `G = L D Lᵀ` of a symmetric
/// positive-definite matrix (`L` unit lower-triangular, `D` diagonal).
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: DenseMatrix,
    pivots: Vec<f64>,
}

impl Cholesky {
    /// Factors `g`, reading only its lower triangle.
    ///
    /// A pivot at or below `n * eps * max|diag|` is treated as a failure of
    /// positive definiteness.
    pub fn factor(g: &DenseMatrix) -> Result<Self> {
        if g.rows != g.cols {
            return Err(LabError::ShapeMismatch {
                op: "cholesky",
                lhs: g.shape(),
                rhs: g.shape(),
            });
        }
        let n = g.rows;
        let max_diag = (0..n).fold(0.0f64, |m, i| m.max(g.get(i, i).abs()));
        let floor = (n.max(1) as f64) * f64::EPSILON * max_diag;
        let mut l = DenseMatrix::identity(n);
        let mut d = vec![0.0; n];
        // scratch row: w[k] = L[j,k] * d[k]
        let mut w = vec![0.0; n];
        for j in 0..n {
            let mut dj = g.get(j, j);
            for k in 0..j {
                w[k] = l.get(j, k) * d[k];
                dj -= l.get(j, k) * w[k];
            }
            if !(dj > floor) {
                return Err(LabError::Singular { pivot: dj, index: j });
            }
            d[j] = dj;
            for i in j + 1..n {
                let mut s = g.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * w[k];
                }
                l.set(i, j, s / dj);
            }
        }
        Ok(Self { lower: l, pivots: d })
    }

    /// Unit lower-triangular factor.
    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn pivots(&self) -> &[f64] {
        &self.pivots
    }

    /// Solves `G X = B` for every column of `b`.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.lower.rows;
        if b.rows != n {
            return Err(LabError::ShapeMismatch {
                op: "spd_solve",
                lhs: self.lower.shape(),
                rhs: b.shape(),
            });
        }
        let l = &self.lower;
        let mut x = b.clone();
        let m = b.cols;
        for i in 0..n {
            for k in 0..i {
                let lik = l.get(i, k);
                if lik != 0.0 {
                    for c in 0..m {
                        x.data[i * m + c] -= lik * x.data[k * m + c];
                    }
                }
            }
        }
        for i in 0..n {
            let d = self.pivots[i];
            for c in 0..m {
                x.data[i * m + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l.get(k, i);
                if lki != 0.0 {
                    for c in 0..m {
                        x.data[i * m + c] -= lki * x.data[k * m + c];
                    }
                }
            }
        }
        Ok(x)
    }
}

/// Solves `G X = B` for symmetric positive-definite `G`.
pub fn spd_solve(g: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    Cholesky::factor(g)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matches!(
            b.matmul(&b),
            Err(LabError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn transposed_gemm_agrees_with_explicit_transpose() {
        let a = DenseMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 1.0);
        let b = DenseMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        let mut out = DenseMatrix::zeros(3, 2);
        gemm(&a, true, &b, false, &mut out, 0.0);
        assert_eq!(out, a.transpose().matmul(&b).unwrap());
        let mut out = DenseMatrix::zeros(4, 4);
        gemm(&a, false, &a, true, &mut out, 0.0);
        assert_eq!(out, a.matmul(&a.transpose()).unwrap());
    }

    #[test]
    fn diagonal_spd_solve() {
        let g = DenseMatrix::identity(2).scale(2.0);
        let b = DenseMatrix::column(&[4.0, 6.0]);
        assert_eq!(spd_solve(&g, &b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let g = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        match Cholesky::factor(&g) {
            Err(LabError::Singular { pivot, index }) => {
                assert_eq!(index, 1);
                assert!((pivot + 3.0).abs() < 1e-12);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0]).is_err());
    }
}
