//! Reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records every operation applied to tracked matrices. Calling
//! [`Tape::backward`] on a `1 x 1` output replays the record in reverse and
//! returns one gradient per node. Leaves created with [`Tape::param`] are
//! tracked; [`Tape::constant`] leaves are not, and neither is anything computed
//! purely from constants.
//!
//! Besides the elementwise and linear-algebra primitives, the tape carries a
//! few fused operations (layer norm, block-diagonal attention, token-max
//! similarity, softmax cross-entropy) whose hand-written backward passes keep
//! the record short for the batched model.

use crate::error::{Error, Result};
use crate::matrix::{argmax, dot, log_sum_exp, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What to do with a row whose norm is (near) zero during normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGuard {
    /// Fail with [`Error::DegenerateRow`].
    Reject,
    /// Divide by `eps` instead of the norm; the row is reported as clamped.
    Clamp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Relu(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    BlockSums {
        x: Var,
        block: usize,
    },
    RowMax {
        x: Var,
        arg: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        clamped: Vec<bool>,
    },
    TokenMaxMean {
        sim: Var,
        row_block: usize,
        col_block: usize,
        arg: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Diag(Var),
    BlockMatMulNt {
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_block: usize,
        k_block: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when nothing flowed.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, m: Matrix) -> Var {
        assert!(m.is_finite(), "parameter contains non-finite values");
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An untracked leaf (data, fixed features).
    pub fn constant(&mut self, m: Matrix) -> Var {
        assert!(m.is_finite(), "constant contains non-finite values");
        self.nodes.push(Node {
            value: m,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `x` into an untracked leaf: the value flows, the gradient stops.
    pub fn detach(&mut self, x: Var) -> Var {
        let m = self.value(x).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), t)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("matmul_nt", value, Op::MatMulNt(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push("transpose", value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("add", value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("sub", value, Op::Sub(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let t = self.tracked(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), t)
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(shape_err(op, am, rm));
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let t = self.tracked(&[a, row]);
        self.push("add_row", value, Op::AddRow(a, row), t)
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v *= b;
            }
        }
        let t = self.tracked(&[a, row]);
        self.push("mul_row", value, Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push("scale", value, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + s);
        let t = self.tracked(&[a]);
        self.push("add_scalar", value, Op::AddScalar(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let t = self.tracked(&[a]);
        self.push("exp", value, Op::Exp(a), t)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        let t = self.tracked(&[a]);
        self.push("softplus", value, Op::Softplus(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(&[a]);
        self.push("sigmoid", value, Op::Sigmoid(a), t)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        let t = self.tracked(&[a]);
        self.push("relu", value, Op::Relu(a), t)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| 1.0 / v);
        let t = self.tracked(&[a]);
        self.push("recip", value, Op::Recip(a), t)
    }

    /// Sum of all entries as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push("sum", value, Op::Sum(a), t)
    }

    /// Mean of all entries as a `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).mean());
        let t = self.tracked(&[a]);
        self.push("mean", value, Op::Mean(a), t)
    }

    /// Per-row sums as a column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let sums: Vec<f64> = m.iter_rows().map(|r| r.iter().sum()).collect();
        let value = Matrix::column(&sums);
        let t = self.tracked(&[a]);
        self.push("row_sums", value, Op::RowSums(a), t)
    }

    /// Sums consecutive groups of `block` rows: `(r x c) -> (r / block x c)`.
    pub fn block_sums(&mut self, x: Var, block: usize) -> Result<Var> {
        let m = self.value(x);
        if block == 0 || m.rows() % block != 0 {
            return Err(Error::InvalidArgument(format!(
                "block_sums: {} rows not divisible by block {block}",
                m.rows()
            )));
        }
        let n = m.rows() / block;
        let mut out = Matrix::zeros(n, m.cols());
        for (r, row) in m.iter_rows().enumerate() {
            for (o, v) in out.row_mut(r / block).iter_mut().zip(row) {
                *o += v;
            }
        }
        let t = self.tracked(&[x]);
        self.push("block_sums", out, Op::BlockSums { x, block }, t)
    }

    /// Row-wise maximum as a column; ties resolve to the lowest column.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        let (arg, vals): (Vec<usize>, Vec<f64>) = m.iter_rows().map(argmax).unzip();
        let value = Matrix::column(&vals);
        let t = self.tracked(&[x]);
        self.push("row_max", value, Op::RowMax { x, arg }, t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let t = self.tracked(parts);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Matrix::new(rows, cols, data)?;
        let t = self.tracked(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let m = self.value(x);
        if count == 0 || start + count > m.rows() {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{} of {} rows",
                start + count,
                m.rows()
            )));
        }
        let value = m.slice_rows(start, count);
        let t = self.tracked(&[x]);
        self.push("slice_rows", value, Op::SliceRows { x, start }, t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let m = self.value(x);
        if count == 0 || start + count > m.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{} of {} cols",
                start + count,
                m.cols()
            )));
        }
        let mut data = Vec::with_capacity(m.rows() * count);
        for row in m.iter_rows() {
            data.extend_from_slice(&row[start..start + count]);
        }
        let value = Matrix::new(m.rows(), count, data)?;
        let t = self.tracked(&[x]);
        self.push("slice_cols", value, Op::SliceCols { x, start }, t)
    }

    /// Stabilized softmax over each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        let mut data = Vec::with_capacity(m.len());
        for row in m.iter_rows() {
            data.extend(crate::matrix::softmax(row));
        }
        let value = Matrix::new(m.rows(), m.cols(), data)?;
        let t = self.tracked(&[x]);
        self.push("softmax_rows", value, Op::SoftmaxRows(x), t)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let m = self.value(x);
        let n = m.cols() as f64;
        let mut out = m.clone();
        let mut inv_std = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = out.row_mut(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        let t = self.tracked(&[x]);
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std }, t)
    }

    /// Unit-L2 rows. Returns the node and the number of clamped rows.
    pub fn l2_normalize(&mut self, x: Var, eps: f64, guard: NormGuard) -> Result<(Var, usize)> {
        let m = self.value(x);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        let mut clamped = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            let is_clamped = !(norm > eps);
            if is_clamped && guard == NormGuard::Reject {
                return Err(Error::DegenerateRow {
                    op: "l2_normalize",
                    row: r,
                    norm,
                    eps,
                });
            }
            let d = if is_clamped { eps } else { norm };
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(d);
            clamped.push(is_clamped);
        }
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let t = self.tracked(&[x]);
        let v = self.push("l2_normalize", out, Op::L2Normalize { x, norms, clamped }, t)?;
        Ok((v, n_clamped))
    }

    /// Reduces a block-structured similarity table: for row block `i` and column
    /// block `j`, the mean over the block's rows of the row-wise maximum over
    /// the block's columns.
    pub fn token_max_mean(&mut self, sim: Var, row_block: usize, col_block: usize) -> Result<Var> {
        let m = self.value(sim);
        if row_block == 0 || col_block == 0 || m.rows() % row_block != 0 || m.cols() % col_block != 0 {
            return Err(Error::InvalidArgument(format!(
                "token_max_mean: {}x{} table does not tile into {row_block}x{col_block} blocks",
                m.rows(),
                m.cols()
            )));
        }
        let (bi, bj) = (m.rows() / row_block, m.cols() / col_block);
        let mut out = Matrix::zeros(bi, bj);
        let mut arg = Vec::with_capacity(m.rows() * bj);
        for r in 0..m.rows() {
            let row = m.row(r);
            for j in 0..bj {
                let (a, v) = argmax(&row[j * col_block..(j + 1) * col_block]);
                arg.push(j * col_block + a);
                let cur = out.get(r / row_block, j);
                out.set(r / row_block, j, cur + v / row_block as f64);
            }
        }
        let t = self.tracked(&[sim]);
        self.push(
            "token_max_mean",
            out,
            Op::TokenMaxMean {
                sim,
                row_block,
                col_block,
                arg,
            },
            t,
        )
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if targets.len() != m.rows() || targets.iter().any(|&t| t >= m.cols()) {
            return Err(Error::InvalidArgument(format!(
                "softmax_xent: {} targets for a {}x{} logit table",
                targets.len(),
                m.rows(),
                m.cols()
            )));
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(m.len());
        for (row, &t) in m.iter_rows().zip(targets) {
            total += log_sum_exp(row) - row[t];
            probs.extend(crate::matrix::softmax(row));
        }
        let probs = Matrix::new(m.rows(), m.cols(), probs)?;
        let value = Matrix::scalar(total / m.rows() as f64);
        let t = self.tracked(&[logits]);
        self.push(
            "softmax_xent",
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
        )
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x);
        if m.rows() != m.cols() {
            return Err(Error::InvalidArgument(format!(
                "diag of non-square {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let d: Vec<f64> = (0..m.rows()).map(|i| m.get(i, i)).collect();
        let t = self.tracked(&[x]);
        self.push("diag", Matrix::column(&d), Op::Diag(x), t)
    }

    /// Block-diagonal `a_i * b_i^T`, stacked: `(n*ba x d), (n*bb x d) -> (n*ba x bb)`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block_a: usize, block_b: usize) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols()
            || block_a == 0
            || block_b == 0
            || am.rows() % block_a != 0
            || bm.rows() % block_b != 0
            || am.rows() / block_a != bm.rows() / block_b
        {
            return Err(shape_err("block_matmul_nt", am, bm));
        }
        let n = am.rows() / block_a;
        let mut data = Vec::with_capacity(am.rows() * block_b);
        for i in 0..n {
            for r in 0..block_a {
                let arow = am.row(i * block_a + r);
                for c in 0..block_b {
                    data.push(dot(arow, bm.row(i * block_b + c)));
                }
            }
        }
        let value = Matrix::new(am.rows(), block_b, data)?;
        let t = self.tracked(&[a, b]);
        self.push(
            "block_matmul_nt",
            value,
            Op::BlockMatMulNt {
                a,
                b,
                block_a,
                block_b,
            },
            t,
        )
    }

    /// Multi-head scaled dot-product attention applied independently per block.
    ///
    /// `q` is `(n*q_block) x d`, `k` and `v` are `(n*k_block) x d`; block `i` of
    /// the queries attends only to block `i` of the keys. `d` splits into
    /// `heads` equal slices.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_block: usize,
        k_block: usize,
    ) -> Result<Var> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        if km.shape() != vm.shape() || km.cols() != d {
            return Err(shape_err("block_attention", qm, km));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "block_attention: width {d} not divisible into {heads} heads"
            )));
        }
        if q_block == 0 || k_block == 0 || qm.rows() % q_block != 0 || km.rows() % k_block != 0 {
            return Err(shape_err("block_attention", qm, km));
        }
        let n = qm.rows() / q_block;
        if km.rows() / k_block != n {
            return Err(shape_err("block_attention", qm, km));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows(), d);
        let mut probs = vec![0.0; n * heads * q_block * k_block];
        let mut scores = vec![0.0; k_block];
        for b in 0..n {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..q_block {
                    let qrow = &qm.row(b * q_block + i)[cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(qrow, &km.row(b * k_block + j)[cols.clone()]) * scale;
                    }
                    let p = crate::matrix::softmax(&scores);
                    let base = ((b * heads + h) * q_block + i) * k_block;
                    probs[base..base + k_block].copy_from_slice(&p);
                    let orow = &mut out.row_mut(b * q_block + i)[cols.clone()];
                    for (j, pj) in p.iter().enumerate() {
                        let vrow = &vm.row(b * k_block + j)[cols.clone()];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let t = self.tracked(&[q, k, v]);
        self.push(
            "block_attention",
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                q_block,
                k_block,
                probs,
            },
            t,
        )
    }

    /// Backpropagates from a `1 x 1` output seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a 1x1 output, got {shape:?}"
            )));
        }
        self.backward_with(out, Matrix::scalar(1.0))
    }

    /// Backpropagates an arbitrary upstream gradient from `out`.
    pub fn backward_with(&self, out: Var, upstream: Matrix) -> Result<Gradients> {
        if upstream.shape() != self.value(out).shape() {
            return Err(shape_err("backward_with", self.value(out), &upstream));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[out.0].tracked {
            grads[out.0] = Some(upstream);
        }
        for i in (0..n).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    let ga = g.matmul_nt(self.value(b)).expect("shapes checked");
                    self.acc(grads, a, ga);
                }
                if self.nodes[b.0].tracked {
                    let ga = self.value(a).transpose().matmul(g).expect("shapes checked");
                    self.acc(grads, b, ga);
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.nodes[a.0].tracked {
                    let ga = g.matmul(self.value(b)).expect("shapes checked");
                    self.acc(grads, a, ga);
                }
                if self.nodes[b.0].tracked {
                    let gb = g.transpose().matmul(self.value(a)).expect("shapes checked");
                    self.acc(grads, b, gb);
                }
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.nodes[a.0].tracked {
                    let ga = g.hadamard(self.value(b)).expect("shapes checked");
                    self.acc(grads, a, ga);
                }
                if self.nodes[b.0].tracked {
                    let gb = g.hadamard(self.value(a)).expect("shapes checked");
                    self.acc(grads, b, gb);
                }
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, g.clone());
                if self.nodes[row.0].tracked {
                    let mut s = g.mean_rows();
                    let n = g.rows() as f64;
                    s.data_mut().iter_mut().for_each(|v| *v *= n);
                    self.acc(grads, row, s);
                }
            }
            &Op::MulRow(a, row) => {
                let r = self.value(row);
                if self.nodes[a.0].tracked {
                    let mut ga = g.clone();
                    let cols = ga.cols();
                    for chunk in ga.data_mut().chunks_mut(cols) {
                        for (v, b) in chunk.iter_mut().zip(r.data()) {
                            *v *= b;
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.nodes[row.0].tracked {
                    let am = self.value(a);
                    let mut gr = Matrix::zeros(1, am.cols());
                    for (grow, arow) in g.iter_rows().zip(am.iter_rows()) {
                        for ((o, gv), av) in gr.data_mut().iter_mut().zip(grow).zip(arow) {
                            *o += gv * av;
                        }
                    }
                    self.acc(grads, row, gr);
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, g.scale(s)),
            &Op::AddScalar(a) => self.acc(grads, a, g.clone()),
            &Op::Exp(a) => self.acc(grads, a, g.hadamard(y).expect("same shape")),
            &Op::Softplus(a) => {
                let d = self.value(a).map(sigmoid);
                self.acc(grads, a, g.hadamard(&d).expect("same shape"));
            }
            &Op::Sigmoid(a) => {
                let d = y.map(|s| s * (1.0 - s));
                self.acc(grads, a, g.hadamard(&d).expect("same shape"));
            }
            &Op::Relu(a) => {
                let d = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, a, g.hadamard(&d).expect("same shape"));
            }
            &Op::Recip(a) => {
                let d = y.map(|r| -r * r);
                self.acc(grads, a, g.hadamard(&d).expect("same shape"));
            }
            &Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                self.acc(grads, a, Matrix::filled(r, c, g.item()));
            }
            &Op::Mean(a) => {
                let (r, c) = self.value(a).shape();
                self.acc(grads, a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            &Op::RowSums(a) => {
                let (r, c) = self.value(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).fill(g.get(row, 0));
                }
                self.acc(grads, a, ga);
            }
            &Op::BlockSums { x, block } => {
                let (r, c) = self.value(x).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).copy_from_slice(g.row(row / block));
                }
                self.acc(grads, x, ga);
            }
            Op::RowMax { x, arg } => {
                let (r, c) = self.value(*x).shape();
                let mut ga = Matrix::zeros(r, c);
                for (row, &a) in arg.iter().enumerate() {
                    ga.set(row, a, g.get(row, 0));
                }
                self.acc(grads, *x, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.nodes[p.0].tracked {
                        self.acc(grads, p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.nodes[p.0].tracked {
                        let mut data = Vec::with_capacity(g.rows() * cols);
                        for row in g.iter_rows() {
                            data.extend_from_slice(&row[start..start + cols]);
                        }
                        let gp = Matrix::new(g.rows(), cols, data).expect("valid slice");
                        self.acc(grads, p, gp);
                    }
                    start += cols;
                }
            }
            &Op::SliceRows { x, start } => {
                let (r, c) = self.value(x).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..g.rows() {
                    ga.row_mut(start + row).copy_from_slice(g.row(row));
                }
                self.acc(grads, x, ga);
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[start..start + g.cols()].copy_from_slice(g.row(row));
                }
                self.acc(grads, x, ga);
            }
            &Op::SoftmaxRows(x) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner = dot(g.row(r), yr);
                    for (gv, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                        *gv = yv * (*gv - inner);
                    }
                }
                self.acc(grads, x, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.cols() as f64;
                let mut ga = g.clone();
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.acc(grads, *x, ga);
            }
            Op::L2Normalize { x, norms, clamped } => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let n = norms[r];
                    if clamped[r] {
                        ga.row_mut(r).iter_mut().for_each(|v| *v /= n);
                    } else {
                        let inner = dot(g.row(r), yr);
                        for (gv, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *gv = (*gv - yv * inner) / n;
                        }
                    }
                }
                self.acc(grads, *x, ga);
            }
            Op::TokenMaxMean {
                sim,
                row_block,
                col_block,
                arg,
            } => {
                let (r, c) = self.value(*sim).shape();
                let bj = c / col_block;
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    for j in 0..bj {
                        let a = arg[row * bj + j];
                        let v = ga.get(row, a) + g.get(row / row_block, j) / *row_block as f64;
                        ga.set(row, a, v);
                    }
                }
                self.acc(grads, *sim, ga);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / probs.rows() as f64;
                let mut ga = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = ga.get(r, t) - scale;
                    ga.set(r, t, v);
                }
                self.acc(grads, *logits, ga);
            }
            &Op::Diag(x) => {
                let n = y.rows();
                let mut ga = Matrix::zeros(n, n);
                for i in 0..n {
                    ga.set(i, i, g.get(i, 0));
                }
                self.acc(grads, x, ga);
            }
            &Op::BlockMatMulNt {
                a,
                b,
                block_a,
                block_b,
            } => {
                let (am, bm) = (self.value(a), self.value(b));
                let n = am.rows() / block_a;
                let d = am.cols();
                if self.nodes[a.0].tracked {
                    let mut ga = Matrix::zeros(am.rows(), d);
                    for i in 0..n {
                        for r in 0..block_a {
                            let grow = g.row(i * block_a + r);
                            let out = ga.row_mut(i * block_a + r);
                            for (c, &gv) in grow.iter().enumerate() {
                                for (o, bv) in out.iter_mut().zip(bm.row(i * block_b + c)) {
                                    *o += gv * bv;
                                }
                            }
                        }
                    }
                    self.acc(grads, a, ga);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = Matrix::zeros(bm.rows(), d);
                    for i in 0..n {
                        for r in 0..block_a {
                            let grow = g.row(i * block_a + r);
                            let arow = am.row(i * block_a + r);
                            for (c, &gv) in grow.iter().enumerate() {
                                for (o, av) in gb.row_mut(i * block_b + c).iter_mut().zip(arow) {
                                    *o += gv * av;
                                }
                            }
                        }
                    }
                    self.acc(grads, b, gb);
                }
            }
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                q_block,
                k_block,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (heads, qb, kb) = (*heads, *q_block, *k_block);
                let d = qm.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let n = qm.rows() / qb;
                let mut gq = Matrix::zeros(qm.rows(), d);
                let mut gk = Matrix::zeros(km.rows(), d);
                let mut gv = Matrix::zeros(vm.rows(), d);
                let mut dp = vec![0.0; kb];
                for b in 0..n {
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..qb {
                            let base = ((b * heads + h) * qb + i) * kb;
                            let p = &probs[base..base + kb];
                            let go = &g.row(b * qb + i)[cols.clone()];
                            for j in 0..kb {
                                let vrow = &vm.row(b * kb + j)[cols.clone()];
                                dp[j] = dot(go, vrow);
                                for (o, gov) in gv.row_mut(b * kb + j)[cols.clone()].iter_mut().zip(go) {
                                    *o += p[j] * gov;
                                }
                            }
                            let inner = dot(&dp, p);
                            let qrow = &qm.row(b * qb + i)[cols.clone()];
                            for j in 0..kb {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &km.row(b * kb + j)[cols.clone()];
                                for (o, kv) in gq.row_mut(b * qb + i)[cols.clone()].iter_mut().zip(krow) {
                                    *o += ds * kv;
                                }
                                for (o, qv) in gk.row_mut(b * kb + j)[cols.clone()].iter_mut().zip(qrow) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
        }
    }

    /// Affine layer `x * weight + bias` with `bias` a `1 x out` row.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_row(h, bias)
    }
}
