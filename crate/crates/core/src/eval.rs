//! Retrieval evaluation: gallery index, ranking, Recall@k and similarity export.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{compose, ComposerParams};
use crate::data::{Split, TripletSample};
use crate::error::{Error, Result};
use crate::geometry::{similarity, SimilarityConfig, SimilarityMode};
use crate::matrix::Matrix;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Normalized candidates with ids.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    ids: Vec<usize>,
    /// Unit rows, candidates stacked: `N*rows x D` (token mode) or `N x D` (pooled).
    stacked: Matrix,
    rows_per_candidate: usize,
    cfg: SimilarityConfig,
}

fn prepare(x: &Matrix, cfg: &SimilarityConfig) -> Result<Matrix> {
    match cfg.mode {
        SimilarityMode::TokenMaxMean => x.l2_normalize_rows(cfg.eps),
        SimilarityMode::PooledCosine => x.mean_rows().l2_normalize_rows(cfg.eps),
    }
}

pub fn build_index(candidates: &[(usize, &Matrix)], cfg: &SimilarityConfig) -> Result<RetrievalIndex> {
    let (_, first) = candidates
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty candidate list".into()))?;
    let shape = first.shape();
    let mut seen = HashSet::with_capacity(candidates.len());
    let mut parts = Vec::with_capacity(candidates.len());
    for &(id, m) in candidates {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "build_index",
                left: shape,
                right: m.shape(),
            });
        }
        parts.push(prepare(m, cfg)?);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(RetrievalIndex {
        ids: candidates.iter().map(|&(id, _)| id).collect(),
        rows_per_candidate: parts[0].rows(),
        stacked: Matrix::concat_rows(&refs)?,
        cfg: *cfg,
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn config(&self) -> &SimilarityConfig {
        &self.cfg
    }

    /// `S(query, candidate)` for every candidate, in index order.
    pub fn scores(&self, query: &Matrix) -> Result<Vec<f64>> {
        let q = prepare(query, &self.cfg)?;
        if q.shape() != (self.rows_per_candidate, self.stacked.cols()) {
            return Err(Error::ShapeMismatch {
                op: "scores",
                left: query.shape(),
                right: (self.rows_per_candidate, self.stacked.cols()),
            });
        }
        let per = self.rows_per_candidate;
        let dots = q.matmul_nt(&self.stacked)?;
        Ok((0..self.ids.len())
            .map(|c| {
                let total: f64 = dots
                    .iter_rows()
                    .map(|row| row[c * per..(c + 1) * per].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .sum();
                total / q.rows() as f64
            })
            .collect())
    }

    fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }
}

/// Candidates by descending score, ties by ascending id.
pub fn rank_scores(ids: &[usize], scores: &[f64]) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = ids.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
}

pub fn rank(query: &Matrix, index: &RetrievalIndex) -> Result<Vec<(usize, f64)>> {
    Ok(rank_scores(&index.ids, &index.scores(query)?))
}

/// 1-based rank of `target` under the same ordering as [`rank_scores`].
fn target_rank(ids: &[usize], scores: &[f64], target_pos: usize) -> usize {
    let (tid, ts) = (ids[target_pos], scores[target_pos]);
    1 + ids
        .iter()
        .zip(scores)
        .filter(|&(&id, &s)| s > ts || (s == ts && id < tid))
        .count()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasDiagnostics {
    pub mean_sim_reference: f64,
    pub mean_sim_modification: f64,
    pub mean_sim_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub mean_recall: f64,
    /// 1-based target rank per query.
    pub ranks: Vec<usize>,
    pub diagnostics: Option<BiasDiagnostics>,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

fn report_from_ranks(ranks: Vec<usize>, ks: &[usize]) -> Result<RecallReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("ks must be positive and non-empty".into()));
    }
    let n = ranks.len().max(1) as f64;
    let recall: Vec<f64> = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    Ok(RecallReport {
        ks: ks.to_vec(),
        mean_recall: recall.iter().sum::<f64>() / recall.len() as f64,
        recall,
        ranks,
        diagnostics: None,
    })
}

/// Recall@k from full rank lists (candidate ids, best first).
pub fn recall_at_k(rank_lists: &[Vec<usize>], targets: &[usize], ks: &[usize]) -> Result<RecallReport> {
    if rank_lists.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rank lists for {} targets",
            rank_lists.len(),
            targets.len()
        )));
    }
    let ranks = rank_lists
        .iter()
        .zip(targets)
        .map(|(list, &t)| {
            list.iter()
                .position(|&id| id == t)
                .map(|p| p + 1)
                .ok_or(Error::MissingTarget(t))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_ranks(ranks, ks)
}

/// Scores every query against the index in parallel and reports Recall@k.
pub fn evaluate_queries(queries: &[Matrix], targets: &[usize], index: &RetrievalIndex, ks: &[usize]) -> Result<RecallReport> {
    if queries.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries for {} targets",
            queries.len(),
            targets.len()
        )));
    }
    let positions = targets
        .iter()
        .map(|&t| index.position(t).ok_or(Error::MissingTarget(t)))
        .collect::<Result<Vec<_>>>()?;
    let ranks = queries
        .par_iter()
        .zip(positions.par_iter())
        .map(|(q, &pos)| index.scores(q).map(|s| target_rank(&index.ids, &s, pos)))
        .collect::<Result<Vec<_>>>()?;
    report_from_ranks(ranks, ks)
}

/// Split gallery: targets keep ids `0..N`, hard negative `j` of query `i`
/// gets id `N + i*H + j`.
pub fn split_gallery(split: &Split) -> Vec<(usize, &Matrix)> {
    let n = split.len();
    let mut out: Vec<(usize, &Matrix)> = split.samples.iter().enumerate().map(|(i, s)| (i, &s.f_t)).collect();
    let mut next = n;
    for negs in &split.hard_negatives {
        for m in negs {
            out.push((next, m));
            next += 1;
        }
    }
    out
}

/// Composed features for every sample, in chunks to bound tape size.
pub fn compose_split(samples: &[TripletSample], params: &ComposerParams) -> Result<Vec<Matrix>> {
    let q = params.config().queries;
    samples
        .par_chunks(64)
        .map(|chunk| {
            let fr: Vec<&Matrix> = chunk.iter().map(|s| &s.f_r).collect();
            let fm: Vec<&Matrix> = chunk.iter().map(|s| &s.f_m).collect();
            let fc = compose(&Matrix::concat_rows(&fr)?, &Matrix::concat_rows(&fm)?, params)?;
            Ok((0..chunk.len()).map(|i| fc.slice_rows(i * q, q)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

pub fn bias_diagnostics(composed: &[Matrix], samples: &[TripletSample], cfg: &SimilarityConfig) -> Result<BiasDiagnostics> {
    let per: Vec<(f64, f64, f64)> = composed
        .par_iter()
        .zip(samples.par_iter())
        .map(|(fc, s)| {
            Ok((
                similarity(fc, &s.f_r, cfg)?,
                similarity(fc, &s.f_m, cfg)?,
                similarity(fc, &s.f_t, cfg)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len().max(1) as f64;
    Ok(BiasDiagnostics {
        mean_sim_reference: per.iter().map(|p| p.0).sum::<f64>() / n,
        mean_sim_modification: per.iter().map(|p| p.1).sum::<f64>() / n,
        mean_sim_target: per.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

/// Full split evaluation: compose queries, rank against the split gallery,
/// attach bias diagnostics.
pub fn evaluate_split(params: &ComposerParams, split: &Split, cfg: &SimilarityConfig, ks: &[usize]) -> Result<RecallReport> {
    let composed = compose_split(&split.samples, params)?;
    let index = build_index(&split_gallery(split), cfg)?;
    let targets: Vec<usize> = (0..split.len()).collect();
    let mut report = evaluate_queries(&composed, &targets, &index, ks)?;
    report.diagnostics = Some(bias_diagnostics(&composed, &split.samples, cfg)?);
    Ok(report)
}

#[derive(Serialize)]
struct SimilaritySidecar<'a> {
    rows: &'a [usize],
    columns: &'a [usize],
    mode: SimilarityMode,
    csv: String,
}

/// Writes `queries x candidates` scores as CSV plus a JSON sidecar naming the
/// rows and columns. Returns the score table.
pub fn export_similarity_matrix(
    queries: &[Matrix],
    query_ids: &[usize],
    index: &RetrievalIndex,
    path: &Path,
) -> Result<Vec<Vec<f64>>> {
    if queries.len() != query_ids.len() {
        return Err(Error::InvalidArgument("one id per query required".into()));
    }
    let table = queries
        .par_iter()
        .map(|q| index.scores(q))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::new();
    for row in &table {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(csv, "{}", line.join(","));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let sidecar_path = path.with_extension("json");
    let sidecar = SimilaritySidecar {
        rows: query_ids,
        columns: &index.ids,
        mode: index.cfg.mode,
        csv: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&sidecar_path, e))?;
    fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(table)
}

/// Parses a CSV written by [`export_similarity_matrix`].
pub fn read_similarity_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Corrupt {
                        path: path.to_path_buf(),
                        reason: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Pairwise scores straight from `S`, without an index; used as a cross-check.
pub fn direct_scores(query: &Matrix, candidates: &[&Matrix], cfg: &SimilarityConfig) -> Result<Vec<f64>> {
    candidates.iter().map(|c| similarity(query, c, cfg)).collect()
}
