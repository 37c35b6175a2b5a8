//! Evidence-driven alignment.
//!
//! Each of the `Q` rows of an anchor is a channel. Its evidence is the
//! activated best match against the target rows, `e_q = act(max_j <â_q, t̂_j> / τ)`.
//! With Dirichlet strength `S = Σ (e_q + 1)`, the belief of channel `q` is
//! `b_q = e_q / S`, the leftover uncertainty is `u = Q / S`, and the
//! reliability of the anchor is `Σ b_q = 1 - u`.
//!
//! The regularizer pulls each stream's reliability towards the composed/target
//! similarity: `mean_b (E_r - S)^2 + (E_m - S)^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::tape::{NormGuard, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Exp,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Exp => x.exp(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Self::Exp),
            "relu" | "rectifier" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            other => Err(Error::InvalidConfig(format!("unknown evidence activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceStream {
    Reference,
    Modification,
}

/// Where the regularizer blocks gradients, if anywhere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopGrad {
    #[default]
    None,
    Reliability,
    Similarity,
}

impl std::str::FromStr for StopGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "reliability" => Ok(Self::Reliability),
            "similarity" => Ok(Self::Similarity),
            other => Err(Error::InvalidConfig(format!("unknown stop-gradient target {other:?}"))),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Per-channel evidence of `anchor` against `f_t`; rows are L2-normalized first.
pub fn channel_evidence(anchor: &Matrix, f_t: &Matrix, tau: f64, act: Activation) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if anchor.cols() != f_t.cols() {
        return Err(Error::ShapeMismatch {
            op: "channel_evidence",
            left: anchor.shape(),
            right: f_t.shape(),
        });
    }
    let a = anchor.l2_normalize_rows(crate::matrix::NORM_EPS)?;
    let t = f_t.l2_normalize_rows(crate::matrix::NORM_EPS)?;
    Ok(a.iter_rows()
        .map(|row| {
            let best = t.iter_rows().map(|tr| dot(row, tr)).fold(f64::NEG_INFINITY, f64::max);
            act.apply(best / tau)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub e: Vec<f64>,
    pub b: Vec<f64>,
    pub u: f64,
    pub reliability: f64,
    pub stream: EvidenceStream,
}

fn check_evidence(e: &[f64]) -> Result<()> {
    if e.is_empty() {
        return Err(Error::InvalidArgument("evidence vector is empty".into()));
    }
    if let Some(bad) = e.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "evidence must be finite and non-negative, got {bad}"
        )));
    }
    Ok(())
}

pub fn belief_and_reliability(e: &[f64], stream: EvidenceStream) -> Result<EvidenceReport> {
    check_evidence(e)?;
    let strength: f64 = e.iter().map(|v| v + 1.0).sum();
    let b: Vec<f64> = e.iter().map(|v| v / strength).collect();
    Ok(EvidenceReport {
        reliability: b.iter().sum(),
        u: e.len() as f64 / strength,
        b,
        e: e.to_vec(),
        stream,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
    pub total_strength: f64,
}

impl DirichletParams {
    /// `1 - K / S`.
    pub fn reliability(&self) -> f64 {
        1.0 - self.alpha.len() as f64 / self.total_strength
    }

    /// Expected class probabilities `α_k / S`.
    pub fn mean(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.total_strength).collect()
    }
}

pub fn evidence_to_dirichlet(e: &[f64]) -> Result<DirichletParams> {
    check_evidence(e)?;
    let alpha: Vec<f64> = e.iter().map(|v| v + 1.0).collect();
    Ok(DirichletParams {
        total_strength: alpha.iter().sum(),
        alpha,
    })
}

/// Which squared terms the regularizer keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvidenceTerms {
    pub reference: bool,
    pub modification: bool,
}

impl Default for EvidenceTerms {
    fn default() -> Self {
        Self {
            reference: true,
            modification: true,
        }
    }
}

/// Per-sample reliabilities against per-sample similarities.
pub fn loss_evi(rel_r: &[f64], rel_m: &[f64], sim: &[f64], terms: EvidenceTerms) -> Result<f64> {
    if sim.is_empty() || rel_r.len() != sim.len() || rel_m.len() != sim.len() {
        return Err(Error::InvalidArgument(format!(
            "loss_evi needs equal non-empty batches, got {}, {}, {}",
            rel_r.len(),
            rel_m.len(),
            sim.len()
        )));
    }
    let mut total = 0.0;
    for ((r, m), s) in rel_r.iter().zip(rel_m).zip(sim) {
        if terms.reference {
            total += (r - s).powi(2);
        }
        if terms.modification {
            total += (m - s).powi(2);
        }
    }
    Ok(total / sim.len() as f64)
}

/// Tape-side reliability for stacked anchors and pre-normalized targets.
#[derive(Clone, Copy, Debug)]
pub struct BatchEvidence {
    pub queries: usize,
    pub tau: f64,
    pub activation: Activation,
    pub eps: f64,
    pub guard: NormGuard,
}

pub struct ReliabilityVars {
    /// `BQ x 1` evidence.
    pub evidence: Var,
    /// `B x 1` reliability.
    pub reliability: Var,
    pub clamped: usize,
}

impl BatchEvidence {
    pub fn reliability(&self, tape: &mut Tape, anchor: Var, target_unit: Var) -> Result<ReliabilityVars> {
        check_tau(self.tau)?;
        let q = self.queries;
        let (a, clamped) = tape.l2_normalize(anchor, self.eps, self.guard)?;
        let dots = tape.block_matmul_nt(a, target_unit, q, q)?;
        let best = tape.row_max(dots)?;
        let logits = tape.scale(best, 1.0 / self.tau)?;
        let evidence = match self.activation {
            Activation::Exp => tape.exp(logits)?,
            Activation::Relu => tape.relu(logits)?,
            Activation::Softplus => tape.softplus(logits)?,
        };
        let total = tape.block_sums(evidence, q)?;
        let strength = tape.add_scalar(total, q as f64)?;
        let inv = tape.recip(strength)?;
        let reliability = tape.mul(total, inv)?;
        Ok(ReliabilityVars {
            evidence,
            reliability,
            clamped,
        })
    }
}

/// Tape-side regularizer; `None` streams are dropped.
pub fn loss_evi_tape(tape: &mut Tape, rel_r: Option<Var>, rel_m: Option<Var>, sim: Var, stop: StopGrad) -> Result<Var> {
    let sim = if stop == StopGrad::Similarity {
        tape.detach(sim)
    } else {
        sim
    };
    let mut acc: Option<Var> = None;
    for rel in [rel_r, rel_m].into_iter().flatten() {
        let rel = if stop == StopGrad::Reliability {
            tape.detach(rel)
        } else {
            rel
        };
        let d = tape.sub(rel, sim)?;
        let sq = tape.mul(d, d)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let acc = acc.ok_or_else(|| Error::InvalidConfig("evidence loss with both streams dropped".into()))?;
    tape.mean(acc)
}
