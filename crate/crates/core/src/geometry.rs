//! Similarity, distance alignment and direction calibration.
//!
//! `S(x, y)` compares two `Q x D` feature sets. The default mode matches each
//! row of `x` with its best row of `y` and averages; the alternative compares
//! mean-pooled rows. Both work on L2-normalized rows, so `S ∈ [-1, 1]`.
//!
//! Both contrastive losses are in-batch softmax cross-entropy over a `B x B`
//! similarity table divided by a temperature, with the diagonal as target.

use serde::{Deserialize, Serialize};

use crate::composer::AnchorSet;
use crate::error::{Error, Result};
use crate::matrix::{argmax, dot, softmax_cross_entropy_row, Matrix};
use crate::tape::{NormGuard, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    TokenMaxMean,
    PooledCosine,
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-max-mean" => Ok(Self::TokenMaxMean),
            "pooled-cosine" => Ok(Self::PooledCosine),
            other => Err(Error::InvalidConfig(format!("unknown similarity mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub mode: SimilarityMode,
    /// Rows with norm at or below this are degenerate.
    pub eps: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::TokenMaxMean,
            eps: 1e-8,
        }
    }
}

fn normalize(x: &Matrix, eps: f64, guard: NormGuard) -> Result<(Matrix, usize)> {
    let mut out = x.clone();
    let mut clamped = 0;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        let d = if norm > eps {
            norm
        } else if guard == NormGuard::Clamp {
            clamped += 1;
            eps
        } else {
            return Err(Error::DegenerateRow {
                op: "similarity",
                row: r,
                norm,
                eps,
            });
        };
        row.iter_mut().for_each(|v| *v /= d);
    }
    Ok((out, clamped))
}

/// `S(x, y)` with an explicit degenerate-row policy; returns the number of
/// clamped rows alongside the value.
pub fn similarity_guarded(x: &Matrix, y: &Matrix, cfg: &SimilarityConfig, guard: NormGuard) -> Result<(f64, usize)> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            left: x.shape(),
            right: y.shape(),
        });
    }
    match cfg.mode {
        SimilarityMode::TokenMaxMean => {
            let (xn, cx) = normalize(x, cfg.eps, guard)?;
            let (yn, cy) = normalize(y, cfg.eps, guard)?;
            let total: f64 = xn
                .iter_rows()
                .map(|a| {
                    let dots: Vec<f64> = yn.iter_rows().map(|b| dot(a, b)).collect();
                    argmax(&dots).1
                })
                .sum();
            Ok((total / x.rows() as f64, cx + cy))
        }
        SimilarityMode::PooledCosine => {
            let (xn, cx) = normalize(&x.mean_rows(), cfg.eps, guard)?;
            let (yn, cy) = normalize(&y.mean_rows(), cfg.eps, guard)?;
            Ok((dot(xn.data(), yn.data()), cx + cy))
        }
    }
}

/// `S(x, y)`; degenerate rows are an error.
pub fn similarity(x: &Matrix, y: &Matrix, cfg: &SimilarityConfig) -> Result<f64> {
    similarity_guarded(x, y, cfg, NormGuard::Reject).map(|(s, _)| s)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Mean softmax cross-entropy of `table / tau` against the diagonal.
pub fn contrastive_from_table(table: &Matrix, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if table.rows() != table.cols() {
        return Err(Error::InvalidArgument(format!(
            "contrastive table must be square, got {:?}",
            table.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..table.rows() {
        let logits: Vec<f64> = table.row(i).iter().map(|s| s / tau).collect();
        total += softmax_cross_entropy_row(&logits, i)?;
    }
    Ok(total / table.rows() as f64)
}

fn pair_table(xs: &[Matrix], ys: &[Matrix], cfg: &SimilarityConfig, guard: NormGuard) -> Result<(Matrix, usize)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "batch sizes must match and be positive, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let b = xs.len();
    let mut table = Matrix::zeros(b, b);
    let mut clamped = 0;
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let (s, c) = similarity_guarded(x, y, cfg, guard)?;
            table.set(i, j, s);
            clamped += c;
        }
    }
    Ok((table, clamped))
}

/// Distance-oriented alignment over a batch of composed and target features.
pub fn loss_dis(f_c: &[Matrix], f_t: &[Matrix], tau: f64, cfg: &SimilarityConfig) -> Result<f64> {
    check_tau(tau)?;
    let (table, _) = pair_table(f_c, f_t, cfg, NormGuard::Reject)?;
    contrastive_from_table(&table, tau)
}

/// Direction-oriented calibration over composition and true directions.
/// Near-zero directions are clamped; the count is returned.
pub fn loss_dir(a_c: &[Matrix], a_t: &[Matrix], tau: f64, cfg: &SimilarityConfig) -> Result<(f64, usize)> {
    check_tau(tau)?;
    let (table, clamped) = pair_table(a_c, a_t, cfg, NormGuard::Clamp)?;
    Ok((contrastive_from_table(&table, tau)?, clamped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySet {
    /// Composition direction `(A_r - F_c) + (A_m - F_c)`.
    pub a_c: Matrix,
    /// True direction `F_t - F_c`.
    pub a_t: Matrix,
}

/// Which anchor directions enter `A_c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionTerms {
    pub reference: bool,
    pub modification: bool,
}

impl Default for DirectionTerms {
    fn default() -> Self {
        Self {
            reference: true,
            modification: true,
        }
    }
}

pub fn build_geometry(anchors: &AnchorSet, f_c: &Matrix, f_t: &Matrix) -> Result<GeometrySet> {
    build_geometry_with(anchors, f_c, f_t, DirectionTerms::default())
}

pub fn build_geometry_with(anchors: &AnchorSet, f_c: &Matrix, f_t: &Matrix, terms: DirectionTerms) -> Result<GeometrySet> {
    if !terms.reference && !terms.modification {
        return Err(Error::InvalidConfig("composition direction needs at least one anchor".into()));
    }
    let d_r = anchors.a_r.sub(f_c)?;
    let d_m = anchors.a_m.sub(f_c)?;
    let a_c = match (terms.reference, terms.modification) {
        (true, true) => d_r.add(&d_m)?,
        (true, false) => d_r,
        _ => d_m,
    };
    Ok(GeometrySet {
        a_c,
        a_t: f_t.sub(f_c)?,
    })
}

/// Tape-side similarity on stacked `BQ x D` inputs.
#[derive(Clone, Copy, Debug)]
pub struct BatchSimilarity {
    pub cfg: SimilarityConfig,
    pub queries: usize,
    pub guard: NormGuard,
}

#[derive(Clone, Copy, Debug)]
pub struct Normalized {
    pub x: Var,
    pub clamped: usize,
}

impl BatchSimilarity {
    /// Unit rows (token mode) or unit pooled rows (pooled mode).
    pub fn prepare(&self, tape: &mut Tape, x: Var) -> Result<Normalized> {
        let x = match self.cfg.mode {
            SimilarityMode::TokenMaxMean => x,
            SimilarityMode::PooledCosine => tape.block_sums(x, self.queries)?,
        };
        let (x, clamped) = tape.l2_normalize(x, self.cfg.eps, self.guard)?;
        Ok(Normalized { x, clamped })
    }

    /// `B x B` table of `S(x_i, y_j)`.
    pub fn table(&self, tape: &mut Tape, x: Normalized, y: Normalized) -> Result<Var> {
        let dots = tape.matmul_nt(x.x, y.x)?;
        match self.cfg.mode {
            SimilarityMode::TokenMaxMean => tape.token_max_mean(dots, self.queries, self.queries),
            SimilarityMode::PooledCosine => Ok(dots),
        }
    }

    /// `B x 1` column of `S(x_i, y_i)`.
    pub fn paired(&self, tape: &mut Tape, x: Normalized, y: Normalized) -> Result<Var> {
        match self.cfg.mode {
            SimilarityMode::TokenMaxMean => {
                let q = self.queries;
                let dots = tape.block_matmul_nt(x.x, y.x, q, q)?;
                let best = tape.row_max(dots)?;
                let sums = tape.block_sums(best, q)?;
                tape.scale(sums, 1.0 / q as f64)
            }
            SimilarityMode::PooledCosine => {
                let prod = tape.mul(x.x, y.x)?;
                tape.row_sums(prod)
            }
        }
    }
}

/// In-batch contrastive loss on a tape table.
pub fn contrastive(tape: &mut Tape, table: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let b = tape.value(table).rows();
    let logits = tape.scale(table, 1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    tape.softmax_xent(logits, &targets)
}
