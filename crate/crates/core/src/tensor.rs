//! Dense row-major `f64` matrices and the numeric kernels shared by the
//! tape and the tape-free inference path.
//!
//! Both paths call the same kernels, so a forward pass evaluated on the tape
//! and one evaluated directly agree bit for bit.

use std::fmt;

/// A row-major `rows x cols` matrix. Vectors are `1 x n` or `n x 1`,
/// scalars are `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
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

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row_slice(i));
        }
        Tensor::from_vec(idx.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, false)
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
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
    // SAFETY: strides and extents describe the owned buffers exactly, and the
    // output buffer is distinct from both inputs.
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
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    None,
    /// `1 x c` against `r x c`.
    Row,
    /// `r x 1` against `r x c`.
    Col,
    /// `1 x 1` against anything.
    Scalar,
}

impl Broadcast {
    pub fn resolve(lhs: (usize, usize), rhs: (usize, usize)) -> Option<Broadcast> {
        if lhs == rhs {
            Some(Broadcast::None)
        } else if rhs == (1, 1) {
            Some(Broadcast::Scalar)
        } else if rhs.0 == 1 && rhs.1 == lhs.1 {
            Some(Broadcast::Row)
        } else if rhs.1 == 1 && rhs.0 == lhs.0 {
            Some(Broadcast::Col)
        } else {
            None
        }
    }

    #[inline]
    pub fn index(self, r: usize, c: usize, rhs_cols: usize) -> usize {
        match self {
            Broadcast::None => r * rhs_cols + c,
            Broadcast::Row => c,
            Broadcast::Col => r,
            Broadcast::Scalar => 0,
        }
    }

    /// Sums a full-shape adjoint down to the right operand's shape.
    pub fn reduce(self, full: &Tensor, rhs_shape: (usize, usize)) -> Tensor {
        match self {
            Broadcast::None => full.clone(),
            _ => {
                let mut out = Tensor::zeros(rhs_shape.0, rhs_shape.1);
                for r in 0..full.rows {
                    for c in 0..full.cols {
                        out.data[self.index(r, c, rhs_shape.1)] += full.data[r * full.cols + c];
                    }
                }
                out
            }
        }
    }
}

/// Elementwise binary op with right-operand broadcasting.
pub fn broadcast_apply(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        for c in 0..a.cols {
            let i = r * a.cols + c;
            out.data[i] = f(a.data[i], b.data[mode.index(r, c, b.cols)]);
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns `(output, xhat, inv_std)`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Tensor::zeros(rows, cols);
    let mut xhat = Tensor::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f64;
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * cols + c] = h;
            out.data[r * cols + c] = gamma.data[c] * h + beta.data[c];
        }
    }
    (out, xhat, inv_std)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts.first().map_or(0, |t| t.rows);
    let cols: usize = parts.iter().map(|t| t.cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            out.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(p.row_slice(r));
            off += p.cols;
        }
    }
    out
}

/// Columns `start..end` of `x`.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Tensor {
    let w = end - start;
    let mut out = Tensor::zeros(x.rows, w);
    for r in 0..x.rows {
        out.data[r * w..(r + 1) * w].copy_from_slice(&x.row_slice(r)[start..end]);
    }
    out
}

/// Row-wise sum, `r x c -> r x 1`.
pub fn row_sum(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, 1);
    for r in 0..x.rows {
        out.data[r] = x.row_slice(r).iter().sum();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_explicit_transpose() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        let ab_t = gemm(&a, false, &b, true);
        assert_eq!(ab_t, a.matmul(&b.transpose()));
        let at_b = gemm(&a, true, &b, false);
        assert_eq!(at_b, a.transpose().matmul(&b));
        assert_eq!(ab_t.get(0, 0), 0.5 - 2.0 + 6.0);
    }

    #[test]
    fn broadcast_resolution() {
        assert_eq!(Broadcast::resolve((3, 2), (3, 2)), Some(Broadcast::None));
        assert_eq!(Broadcast::resolve((3, 2), (1, 2)), Some(Broadcast::Row));
        assert_eq!(Broadcast::resolve((3, 2), (3, 1)), Some(Broadcast::Col));
        assert_eq!(Broadcast::resolve((3, 2), (1, 1)), Some(Broadcast::Scalar));
        assert_eq!(Broadcast::resolve((3, 2), (2, 3)), None);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 1.0]);
        let (y, _, _) = layer_norm(&x, &Tensor::filled(1, 4, 1.0), &Tensor::zeros(1, 4));
        for r in 0..2 {
            let row = y.row_slice(r);
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(silu(0.0), 0.0);
    }
}
