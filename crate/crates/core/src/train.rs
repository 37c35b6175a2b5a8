//! Training: run configuration, AdamW, checkpoints, the step loop, ablation
//! and hyper-parameter sweeps.
//!
//! Batches are indexed by step: step `s` belongs to epoch `s / n_batches` and
//! takes slot `s % n_batches` of that epoch's shuffled order. Resuming from a
//! checkpoint therefore needs only the step counter, parameters and optimizer
//! moments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::{ComposerParams, ModelConfig, Net};
use crate::data::{Dataset, TripletSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, RecallReport, DEFAULT_KS};
use crate::evidence::{Activation, StopGrad};
use crate::geometry::{SimilarityConfig, SimilarityMode};
use crate::gradcheck::{gradcheck_many, DEFAULT_STEP};
use crate::matrix::Matrix;
use crate::pipeline::{forward, Ablation, BatchInput, LossBreakdown, LossConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub kappa: f64,
    pub lambda: f64,
    pub tau: f64,
    pub queries: usize,
    pub dim: usize,
    /// Frames per video; informational at desk scale.
    pub frames: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub similarity: SimilarityMode,
    pub activation: Activation,
    pub stop_grad: StopGrad,
    pub grad_clip: Option<f64>,
    #[serde(flatten)]
    pub ablation: Ablation,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            lambda: 1.0,
            tau: 0.1,
            queries: 8,
            dim: 16,
            frames: 1,
            heads: 4,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            steps: 2000,
            eval_every: 200,
            seed: 0,
            similarity: SimilarityMode::TokenMaxMean,
            activation: Activation::Exp,
            stop_grad: StopGrad::None,
            grad_clip: None,
            ablation: Ablation::default(),
            dataset: None,
            output: None,
        }
    }
}

pub const VARIANTS: [&str; 12] = [
    "wo_C_ref",
    "wo_C_mod",
    "wo_SCD",
    "wo_Ldis",
    "wo_A_ref",
    "wo_A_mod",
    "wo_Ldir",
    "wo_Evi_ref",
    "wo_Evi_mod",
    "wo_Levi",
    "act_relu",
    "act_softplus",
];

impl RunConfig {
    /// `desk` (the defaults) or `paper-scale`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "paper-scale" => Some(Self {
                queries: 128,
                dim: 256,
                frames: 4,
                batch_size: 64,
                lr: 2e-5,
                ..Self::default()
            }),
            _ => None,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            ..ModelConfig::new(self.queries, self.dim)
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            kappa: self.kappa,
            lambda: self.lambda,
            tau: self.tau,
            similarity: SimilarityConfig {
                mode: self.similarity,
                ..SimilarityConfig::default()
            },
            activation: self.activation,
            stop_grad: self.stop_grad,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be non-negative, got {}", self.kappa));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.model().validate()?;
        self.ablation.validate()
    }

    /// Applies a named variant: an ablation flag or an activation swap.
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => {}
            "act_relu" => self.activation = Activation::Relu,
            "act_softplus" => self.activation = Activation::Softplus,
            other => match self.ablation.flag_mut(other) {
                Some(flag) => *flag = true,
                None => return Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
            },
        }
        self.ablation.validate()
    }

    pub fn with_variant(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        c.apply_variant(name)?;
        Ok(c)
    }
}

/// Adam with decoupled weight decay, applied to every tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &[Matrix], lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *pv *= decay;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients down to global norm `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_MAGIC: &[u8; 5] = b"RTRKP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: ComposerParams,
    pub optimizer: AdamW,
    /// Chained SHA-256 over the loss rows of every completed step.
    pub loss_digest: String,
    pub dataset_hash: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    step: usize,
    config: RunConfig,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    loss_digest: String,
    dataset_hash: String,
}

fn corrupt(path: &Path, reason: &str) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.params;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            model: p.config().clone(),
            tensors: p
                .named()
                .map(|(n, m)| TensorEntry {
                    name: n.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
            adam_t: self.optimizer.t,
            adam_beta1: self.optimizer.beta1,
            adam_beta2: self.optimizer.beta2,
            adam_eps: self.optimizer.eps,
            loss_digest: self.loss_digest.clone(),
            dataset_hash: self.dataset_hash.clone(),
        };
        let meta_path = dir.join("ckpt.json");
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(p.values().len() as u32).to_le_bytes());
        for (name, m) in p.named() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        }
        for group in [p.values(), &self.optimizer.m, &self.optimizer.v] {
            for m in group {
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let bin_path = dir.join("params.bin");
        fs::write(&bin_path, buf).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("ckpt.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: meta.format_version,
            });
        }
        let bin_path = dir.join("params.bin");
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() < 17 || &bytes[..5] != PARAMS_MAGIC {
            return Err(corrupt(&bin_path, "bad magic bytes"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(corrupt(&bin_path, "checksum mismatch"));
        }
        let mut pos = 5;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = body.get(*pos..*pos + 4).ok_or_else(|| corrupt(&bin_path, "truncated header"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let version = u32_at(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let count = u32_at(&mut pos)? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(&mut pos)? as usize;
            let name = body
                .get(pos..pos + len)
                .and_then(|b| std::str::from_utf8(b).ok())
                .ok_or_else(|| corrupt(&bin_path, "bad tensor name"))?
                .to_string();
            pos += len;
            let rows = u32_at(&mut pos)? as usize;
            let cols = u32_at(&mut pos)? as usize;
            table.push((name, rows, cols));
        }
        if table.len() != meta.tensors.len()
            || table
                .iter()
                .zip(&meta.tensors)
                .any(|((n, r, c), t)| n != &t.name || *r != t.rows || *c != t.cols)
        {
            return Err(corrupt(&bin_path, "tensor table disagrees with ckpt.json"));
        }
        let read_group = |pos: &mut usize| -> Result<Vec<Matrix>> {
            table
                .iter()
                .map(|(_, r, c)| {
                    let n = r * c;
                    let raw = body
                        .get(*pos..*pos + 8 * n)
                        .ok_or_else(|| corrupt(&bin_path, "truncated tensor data"))?;
                    *pos += 8 * n;
                    let data = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    Matrix::new(*r, *c, data)
                })
                .collect()
        };
        let values = read_group(&mut pos)?;
        let m = read_group(&mut pos)?;
        let v = read_group(&mut pos)?;
        if pos != body.len() {
            return Err(corrupt(&bin_path, "trailing bytes"));
        }
        let named = table.iter().map(|(n, _, _)| n.clone()).zip(values).collect();
        let params = ComposerParams::from_named(&meta.model, named)?;
        Ok(Self {
            optimizer: AdamW {
                lr: meta.config.lr,
                beta1: meta.adam_beta1,
                beta2: meta.adam_beta2,
                eps: meta.adam_eps,
                weight_decay: meta.config.weight_decay,
                t: meta.adam_t,
                m,
                v,
            },
            config: meta.config,
            step: meta.step,
            params,
            loss_digest: meta.loss_digest,
            dataset_hash: meta.dataset_hash,
        })
    }
}

fn chain_digest(prev: &str, line: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(line.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: Option<LossBreakdown>,
    pub val: Option<[f64; 3]>,
}

pub const METRICS_HEADER: &str = "step,L_total,L_dis,L_dir,L_evi,val_R1,val_R5,val_R10";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{}", self.step);
        match self.loss {
            Some(l) => {
                let _ = write!(s, ",{},{},{},{}", l.total, l.dis, l.dir, l.evi);
            }
            None => s.push_str(",,,,"),
        }
        match self.val {
            Some(v) => {
                let _ = write!(s, ",{},{},{}", v[0], v[1], v[2]);
            }
            None => s.push_str(",,,"),
        }
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn recall_triple(r: &RecallReport) -> [f64; 3] {
    [r.recall[0], r.recall[1], r.recall[2]]
}

/// Step-level training state.
pub struct Trainer<'a> {
    cfg: RunConfig,
    loss: LossConfig,
    data: &'a Dataset,
    params: ComposerParams,
    opt: AdamW,
    step: usize,
    digest: String,
    dataset_hash: String,
    /// Per scalar: has it ever received a non-zero gradient.
    touched: Vec<Vec<bool>>,
    pub clamped_directions: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, data: &'a Dataset) -> Result<Self> {
        let params = ComposerParams::init(&cfg.model(), cfg.seed)?;
        Self::with_state(cfg, data, params, None, 0, String::new())
    }

    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let hash = data.content_hash();
        if hash != ckpt.dataset_hash {
            return Err(Error::InvalidConfig("checkpoint was trained on a different dataset".into()));
        }
        Self::with_state(&ckpt.config, data, ckpt.params, Some(ckpt.optimizer), ckpt.step, ckpt.loss_digest)
    }

    fn with_state(
        cfg: &RunConfig,
        data: &'a Dataset,
        params: ComposerParams,
        opt: Option<AdamW>,
        step: usize,
        digest: String,
    ) -> Result<Self> {
        cfg.validate()?;
        let dc = data.config();
        if dc.queries != cfg.queries || dc.dim != cfg.dim {
            return Err(Error::InvalidConfig(format!(
                "dataset features are {}x{}, run expects {}x{}",
                dc.queries, dc.dim, cfg.queries, cfg.dim
            )));
        }
        let opt = opt.unwrap_or_else(|| AdamW::new(params.values(), cfg.lr, cfg.weight_decay));
        let touched = params.values().iter().map(|m| vec![false; m.len()]).collect();
        Ok(Self {
            loss: cfg.loss(),
            cfg: cfg.clone(),
            data,
            params,
            opt,
            step,
            digest,
            dataset_hash: data.content_hash(),
            touched,
            clamped_directions: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ComposerParams {
        &self.params
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.batch_count(self.cfg.batch_size)
    }

    /// Samples used at step `s`.
    pub fn batch_at(&self, s: usize) -> Vec<&'a TripletSample> {
        let nb = self.batches_per_epoch();
        let epoch = (s / nb) as u64;
        let order = self
            .data
            .train
            .batch_order(self.cfg.batch_size, derive_seed(self.cfg.seed, Stream::Shuffle, epoch));
        order[s % nb].iter().map(|&i| &self.data.train.samples[i]).collect()
    }

    /// Loss and gradients at the current parameters, without updating.
    pub fn evaluate_batch(&self, samples: &[&TripletSample]) -> Result<(LossBreakdown, Vec<Matrix>, usize)> {
        let batch = BatchInput::from_samples(samples)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true);
        let out = forward(&mut tape, &Net::new(&self.params, &vars), &batch, &self.loss)?;
        let breakdown = out.breakdown(&tape);
        let grads = if tape.is_tracked(out.total) {
            let g = tape.backward(out.total)?;
            vars.iter().map(|&v| g.wrt(v)).collect()
        } else {
            self.params.values().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
        };
        Ok((breakdown, grads, out.clamped_directions))
    }

    /// One optimizer step on the batch for the current step index.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let samples = self.batch_at(self.step);
        let (loss, mut grads, clamped) = self.evaluate_batch(&samples)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { term: "total" });
        }
        self.clamped_directions += clamped;
        for (seen, g) in self.touched.iter_mut().zip(&grads) {
            for (s, v) in seen.iter_mut().zip(g.data()) {
                *s |= *v != 0.0;
            }
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        self.opt.step(self.params.values_mut(), &grads);
        if self.params.values().iter().any(|m| !m.is_finite()) {
            return Err(Error::Divergence { term: "parameters" });
        }
        let row = MetricsRow {
            step: self.step,
            loss: Some(loss),
            val: None,
        };
        self.digest = chain_digest(&self.digest, &row.csv_line());
        self.step += 1;
        Ok(loss)
    }

    pub fn validate(&self) -> Result<RecallReport> {
        evaluate_split(&self.params, &self.data.val, &self.loss.similarity, &DEFAULT_KS)
    }

    /// Names of tensors with at least one scalar that never received a gradient.
    pub fn dead_parameters(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .zip(&self.touched)
            .filter(|(_, seen)| seen.iter().any(|s| !s))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: self.opt.clone(),
            loss_digest: self.digest.clone(),
            dataset_hash: self.dataset_hash.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_params: ComposerParams,
    pub best_step: usize,
    pub best_val_r1: f64,
    pub initial_val: RecallReport,
    pub final_val: RecallReport,
    pub metrics: Vec<MetricsRow>,
    pub clamped_directions: usize,
    pub seconds: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config: &'a RunConfig,
    dataset_hash: &'a str,
    steps: usize,
    best_step: usize,
    best_val_r1: f64,
    final_val: &'a RecallReport,
    clamped_directions: usize,
    loss_digest: &'a str,
}

#[derive(Serialize)]
struct RecallFile<'a> {
    step: usize,
    best_step: usize,
    best_val_r1: f64,
    val: &'a RecallReport,
    /// Wall-clock seconds since the Unix epoch; the only non-reproducible field.
    timestamp: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` optimizer steps from `trainer`'s current state, validating
/// every `eval_every` steps and once more at the end.
pub fn run_training(mut trainer: Trainer, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let cfg = trainer.config().clone();
    let first = trainer.step_index();
    let mut metrics = Vec::with_capacity(cfg.steps.saturating_sub(first) + 1);
    let mut best: Option<(f64, usize, ComposerParams)> = None;
    let mut initial_val = None;
    let mut consider = |r1: f64, step: usize, params: &ComposerParams| {
        if best.as_ref().is_none_or(|b| r1 > b.0) {
            best = Some((r1, step, params.clone()));
        }
    };
    for s in first..cfg.steps {
        let val = if s % cfg.eval_every == 0 {
            let r = trainer.validate()?;
            consider(r.recall[0], s, trainer.params());
            let t = recall_triple(&r);
            initial_val.get_or_insert(r);
            Some(t)
        } else {
            None
        };
        let loss = trainer.step()?;
        metrics.push(MetricsRow {
            step: s,
            loss: Some(loss),
            val,
        });
    }
    let final_val = trainer.validate()?;
    consider(final_val.recall[0], trainer.step_index(), trainer.params());
    metrics.push(MetricsRow {
        step: trainer.step_index(),
        loss: None,
        val: Some(recall_triple(&final_val)),
    });
    let (best_val_r1, best_step, best_params) = best.expect("at least one validation");
    let outcome = TrainOutcome {
        final_checkpoint: trainer.checkpoint(),
        best_params,
        best_step,
        best_val_r1,
        initial_val: initial_val.unwrap_or_else(|| final_val.clone()),
        final_val,
        metrics,
        clamped_directions: trainer.clamped_directions,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        write_outcome(&outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(&outcome.metrics)).map_err(|e| Error::io(&csv_path, e))?;
    let ck = &outcome.final_checkpoint;
    ck.save(&dir.join("final"))?;
    Checkpoint {
        params: outcome.best_params.clone(),
        step: outcome.best_step,
        ..ck.clone()
    }
    .save(&dir.join("best"))?;
    write_json(
        &dir.join("run.json"),
        &RunSummary {
            config: &ck.config,
            dataset_hash: &ck.dataset_hash,
            steps: ck.step,
            best_step: outcome.best_step,
            best_val_r1: outcome.best_val_r1,
            final_val: &outcome.final_val,
            clamped_directions: outcome.clamped_directions,
            loss_digest: &ck.loss_digest,
        },
    )?;
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &dir.join("recall.json"),
        &RecallFile {
            step: ck.step,
            best_step: outcome.best_step,
            best_val_r1: outcome.best_val_r1,
            val: &outcome.final_val,
            timestamp,
        },
    )
}

/// Trains from scratch.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run_training(Trainer::new(cfg, data)?, out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub recall: Vec<f64>,
    pub mean_recall: f64,
    pub best_val_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub dataset_hash: String,
    pub rows: Vec<VariantResult>,
}

fn test_recall(params: &ComposerParams, cfg: &RunConfig, data: &Dataset) -> Result<RecallReport> {
    evaluate_split(params, &data.test, &cfg.loss().similarity, &DEFAULT_KS)
}

fn run_variant(base: &RunConfig, data: &Dataset, variant: &str, seed: u64) -> Result<VariantResult> {
    let cfg = RunConfig {
        seed,
        ..base.with_variant(variant)?
    };
    let outcome = train(&cfg, data, None)?;
    let report = test_recall(&outcome.final_checkpoint.params, &cfg, data)?;
    Ok(VariantResult {
        variant: variant.to_string(),
        seed,
        mean_recall: report.mean_recall,
        recall: report.recall,
        best_val_r1: outcome.best_val_r1,
    })
}

/// Trains the full model and each variant for every seed; rows are ordered
/// by seed, then variant (full model first). Reports final test recall.
pub fn ablate(base: &RunConfig, data: &Dataset, variants: &[String], seeds: &[u64]) -> Result<AblationReport> {
    let mut names = vec!["full".to_string()];
    names.extend(variants.iter().filter(|v| v.as_str() != "full").cloned());
    for n in &names {
        base.with_variant(n)?;
    }
    let jobs: Vec<(u64, &String)> = seeds.iter().flat_map(|&s| names.iter().map(move |n| (s, n))).collect();
    let rows = jobs
        .par_iter()
        .map(|(s, n)| run_variant(base, data, n, *s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        ks: DEFAULT_KS.to_vec(),
        dataset_hash: data.content_hash(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub mean_recall: Vec<f64>,
}

impl AblationReport {
    /// Per-variant recall averaged over seeds, in first-seen order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut out: Vec<VariantSummary> = Vec::new();
        for row in &self.rows {
            let entry = match out.iter_mut().position(|s| s.variant == row.variant) {
                Some(i) => &mut out[i],
                None => {
                    out.push(VariantSummary {
                        variant: row.variant.clone(),
                        seeds: 0,
                        mean_recall: vec![0.0; row.recall.len()],
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            entry.seeds += 1;
            for (m, r) in entry.mean_recall.iter_mut().zip(&row.recall) {
                *m += r;
            }
        }
        for s in &mut out {
            let n = s.seeds as f64;
            s.mean_recall.iter_mut().for_each(|m| *m /= n);
        }
        out
    }

    pub fn mean_r1(&self, variant: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.variant == variant).map(|s| s.mean_recall[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kappa: f64,
    pub lambda: f64,
    pub recall: Vec<f64>,
    pub mean_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub ks: Vec<usize>,
    pub dataset_hash: String,
    pub points: Vec<SweepPoint>,
}

/// Grid over `kappas x lambdas`; an empty axis keeps the base value.
pub fn sweep(base: &RunConfig, data: &Dataset, kappas: &[f64], lambdas: &[f64]) -> Result<SweepReport> {
    let ks: Vec<f64> = if kappas.is_empty() { vec![base.kappa] } else { kappas.to_vec() };
    let ls: Vec<f64> = if lambdas.is_empty() { vec![base.lambda] } else { lambdas.to_vec() };
    let grid: Vec<(f64, f64)> = ks.iter().flat_map(|&k| ls.iter().map(move |&l| (k, l))).collect();
    let points = grid
        .par_iter()
        .map(|&(kappa, lambda)| {
            let cfg = RunConfig {
                kappa,
                lambda,
                ..base.clone()
            };
            cfg.validate()?;
            let outcome = train(&cfg, data, None)?;
            let r = test_recall(&outcome.final_checkpoint.params, &cfg, data)?;
            Ok(SweepPoint {
                kappa,
                lambda,
                mean_recall: r.mean_recall,
                recall: r.recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        ks: DEFAULT_KS.to_vec(),
        dataset_hash: data.content_hash(),
        points,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineGradcheck {
    pub seed: u64,
    /// Worst relative error for `L_dis`, `L_dir`, `L_evi` and the total.
    pub max_rel_error: [f64; 4],
    pub entries: usize,
    pub seconds: f64,
}

impl PipelineGradcheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Central-difference check of every loss term against the tape, at a
/// randomly perturbed initialization and a Gaussian batch of `batch` samples.
pub fn gradcheck_pipeline(cfg: &RunConfig, seed: u64, batch: usize) -> Result<PipelineGradcheck> {
    cfg.validate()?;
    let start = Instant::now();
    let model = cfg.model();
    let mut params = ComposerParams::init(&model, seed)?;
    params.perturb(0.1, &mut stream_rng(seed, Stream::Init, 1));
    let mut rng = stream_rng(seed, Stream::Sample, u64::MAX - 1);
    let rows = batch * model.queries;
    let input = BatchInput {
        f_r: Matrix::random_normal(rows, model.dim, 1.0, &mut rng),
        f_m: Matrix::random_normal(rows, model.dim, 1.0, &mut rng),
        f_t: Matrix::random_normal(rows, model.dim, 1.0, &mut rng),
        size: batch,
    };
    let loss = cfg.loss();
    let report = gradcheck_many(
        |tape, vars| {
            let out = forward(tape, &Net::new(&params, vars), &input, &loss)?;
            let mut or_zero = |v: Option<Var>| v.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)));
            Ok(vec![or_zero(out.dis), or_zero(out.dir), or_zero(out.evi), out.total])
        },
        params.values(),
        DEFAULT_STEP,
    )?;
    let e = &report.max_rel_error;
    Ok(PipelineGradcheck {
        seed,
        max_rel_error: [e[0], e[1], e[2], e[3]],
        entries: report.entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn tiny_data() -> Dataset {
        generate(&GeneratorConfig {
            train: 64,
            val: 16,
            test: 16,
            seed: 3,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            batch_size: 8,
            steps: 12,
            eval_every: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![Matrix::from_rows(&[[1.0, -2.0]])];
        let g = vec![Matrix::from_rows(&[[0.5, -3.0]])];
        let mut opt = AdamW::new(&p, 0.1, 0.0);
        opt.step(&mut p, &g);
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p[0].get(0, 1) + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = vec![Matrix::from_rows(&[[2.0]])];
        let mut opt = AdamW::new(&p, 0.1, 0.5);
        opt.step(&mut p, &[Matrix::zeros(1, 1)]);
        assert!((p[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Matrix::from_rows(&[[3.0, 4.0]])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig { tau: 0.0, ..RunConfig::default() },
            RunConfig { kappa: -1.0, ..RunConfig::default() },
            RunConfig { dim: 18, ..RunConfig::default() },
            RunConfig { batch_size: 0, ..RunConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(RunConfig::default().with_variant("wo_SCD").unwrap().with_variant("wo_C_ref").is_err());
        assert!(RunConfig::default().with_variant("nope").is_err());
        let p = RunConfig::preset("paper-scale").unwrap();
        assert_eq!((p.queries, p.dim, p.batch_size, p.lr), (128, 256, 64, 2e-5));
    }

    #[test]
    fn config_json_uses_flat_variant_keys() {
        let cfg = RunConfig::default().with_variant("wo_Ldir").unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["wo_Ldir"], serde_json::json!(true));
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"kappa": 2.0, "wo_SCD": true}"#).unwrap();
        assert_eq!(partial.kappa, 2.0);
        assert!(partial.ablation.wo_scd);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let a = train(&tiny_cfg(), &data, None).unwrap();
        let b = train(&tiny_cfg(), &data, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.final_checkpoint, b.final_checkpoint);
        assert_eq!(a.metrics.len(), 13);
        assert!(a.metrics[0].val.is_some() && a.metrics[5].val.is_some() && a.metrics[1].val.is_none());
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut straight = Trainer::new(&cfg, &data).unwrap();
        for _ in 0..4 {
            straight.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        straight.checkpoint().save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded, straight.checkpoint());

        let mut resumed = Trainer::resume(loaded, &data).unwrap();
        let a = straight.step().unwrap();
        let b = resumed.step().unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(straight.checkpoint(), resumed.checkpoint());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let data = tiny_data();
        let t = Trainer::new(&tiny_cfg(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.checkpoint().save(dir.path()).unwrap();
        let path = dir.path().join("params.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[40] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn no_dead_parameters_after_an_epoch() {
        let data = tiny_data();
        let mut t = Trainer::new(&tiny_cfg(), &data).unwrap();
        for _ in 0..t.batches_per_epoch() {
            t.step().unwrap();
        }
        assert!(t.dead_parameters().is_empty(), "{:?}", t.dead_parameters());
    }

    #[test]
    fn ablation_report_bookkeeping() {
        let data = tiny_data();
        let cfg = RunConfig { steps: 2, ..tiny_cfg() };
        let empty = ablate(&cfg, &data, &[], &[0]).unwrap();
        assert_eq!(empty.rows.len(), 1);
        assert_eq!(empty.rows[0].variant, "full");
        let two = ablate(&cfg, &data, &["wo_Levi".into(), "wo_Ldir".into()], &[0]).unwrap();
        assert_eq!(two.rows.len(), 3);
        assert_eq!(two.dataset_hash, empty.dataset_hash);
        let summary = two.summary();
        assert_eq!(summary.len(), 3);
        assert_eq!(two.mean_r1("wo_Levi"), Some(two.rows[1].recall[0]));
    }

    #[test]
    fn dataset_shape_must_match() {
        let data = tiny_data();
        let cfg = RunConfig { dim: 32, ..tiny_cfg() };
        assert!(Trainer::new(&cfg, &data).is_err());
    }
}
