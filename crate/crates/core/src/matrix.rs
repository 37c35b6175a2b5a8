//! Dense row-major `f64` matrices.
//!
//! Everything the pipeline manipulates (reference, modification, composed and
//! target features, contributions, anchors) is a `Q x D` [`Matrix`]. The plain
//! operations here are untracked; [`crate::tape::Tape`] wraps the subset that
//! needs gradients.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};

/// Default epsilon below which a row norm is treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged or empty input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].as_ref().len();
        assert!(cols > 0, "from_rows needs at least one column");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn column(values: &[f64]) -> Self {
        Self::new(values.len(), 1, values.to_vec()).expect("non-empty column")
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self::new(1, values.len(), values.to_vec()).expect("non-empty row")
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(rows, cols, data).expect("positive dimensions")
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
    pub fn shape(&self) -> Shape {
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols)
    }

    /// The scalar held by a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        matmul_into(
            &self.data,
            &other.data,
            &mut out,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// `self * other^T`, without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for a in self.iter_rows() {
            for b in other.iter_rows() {
                out.push(dot(a, b));
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
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

    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(|r| dot(r, r).sqrt()).collect()
    }

    /// Scales every row to unit L2 norm; rejects rows whose norm is at most `eps`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Matrix> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if !(norm > eps) {
                return Err(Error::DegenerateRow {
                    op: "l2_normalize_rows",
                    row: r,
                    norm,
                    eps,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }

    /// Mean over rows, returned as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Stacks matrices with a common column count on top of each other.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Matrix::new(data.len() / cols, cols, data)
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        assert!(count > 0 && start + count <= self.rows, "row slice out of range");
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a (m x k) * b (k x n)`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Index and value of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Stable `log(sum(exp(values)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let (_, max) = argmax(values);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of one vector with max subtraction.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let (_, max) = argmax(values);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log(softmax(logits)[target])`.
pub fn softmax_cross_entropy_row(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy_row",
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(a.matmul(&b).unwrap().item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let b = Matrix::random_normal(7, 3, 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn matmul_is_associative() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_normal(4, 5, 1.0, &mut rng);
            let b = Matrix::random_normal(5, 6, 1.0, &mut rng);
            let c = Matrix::random_normal(6, 3, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[[3.0, 4.0]]).l2_normalize_rows(NORM_EPS).unwrap();
        assert!((m.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_unit_rows_is_idempotent() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0], [0.6, 0.8]]);
        let n = m.l2_normalize_rows(NORM_EPS).unwrap();
        assert!(n.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn normalized_random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Matrix::random_normal(4, 4, 2.0, &mut rng)
            .l2_normalize_rows(NORM_EPS)
            .unwrap();
        for n in m.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        assert!(matches!(
            m.l2_normalize_rows(NORM_EPS),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        for t in 0..4 {
            let v = softmax_cross_entropy_row(&[0.3; 4], t).unwrap();
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturated() {
        let v = softmax_cross_entropy_row(&[50.0, -50.0], 0).unwrap();
        assert!(v <= 1e-20, "{v}");
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [1.0f64, 2.0, 3.0];
        let direct = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let v = softmax_cross_entropy_row(&logits, 2).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        assert!(softmax_cross_entropy_row(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = Matrix::random_normal(1, 9, 10.0, &mut rng);
            let s: f64 = softmax(m.data()).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), (1, 3.0));
        assert_eq!(argmax(&[5.0, 5.0]), (0, 5.0));
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }
}
