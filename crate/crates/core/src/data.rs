//! Synthetic composed-retrieval triplets.
//!
//! Latents follow an additive composition rule: `z_t = z_r + M z_m` with a
//! fixed mixing matrix `M`. Features are `Q x D` matrices whose rows all encode
//! the same latent through a fixed projection plus independent Gaussian noise.
//!
//! * reference: `f_r = V z_r`
//! * modification: `f_m = (V M + T) z_m / sqrt(2)`, the visual displacement
//!   the text describes mixed with a text-only nuisance map `T`
//! * target: `f_t = V ((1 - beta) z_t + beta z_r)`, so `beta` blends reference
//!   content into the target (reference-biased targets)
//!
//! Reference and target share the visual map `V`. Validation and test
//! queries also carry hard negatives: targets built from the same `z_r` with
//! a fresh modification latent.
//!
//! On disk a dataset is a directory holding `manifest.json`, `data.bin`
//! (features) and `extras.bin` (latents and hard negatives).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};

pub const FORMAT_VERSION: u32 = 1;
pub const DATA_MAGIC: &[u8; 4] = b"RTRK";
pub const EXTRAS_MAGIC: &[u8; 4] = b"RTRX";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const EXTRAS_FILE: &str = "extras.bin";

/// Generator parameters; also the persisted manifest minus the maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub queries: usize,
    pub dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise: f64,
    pub bias: f64,
    pub hard_negatives: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            queries: 8,
            dim: 16,
            train: 4096,
            val: 512,
            test: 512,
            noise: 0.05,
            bias: 0.5,
            hard_negatives: 3,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// `Q = 32 * N_f` with four frames; otherwise the desk defaults.
    pub fn paper_scale() -> Self {
        Self {
            queries: 128,
            dim: 256,
            latent_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.latent_dim < 2 {
            return bad(format!("latent_dim must be at least 2, got {}", self.latent_dim));
        }
        if self.queries < 1 {
            return bad("queries must be at least 1".into());
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.train < 1 || self.val < 1 || self.test < 1 {
            return bad("every split needs at least one sample".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return bad(format!("bias must lie in [0, 1], got {}", self.bias));
        }
        Ok(())
    }
}

/// Fixed maps drawn once per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMaps {
    /// `D x d_z`, reference encoder.
    pub reference: Matrix,
    /// `D x d_z`, modification encoder.
    pub modification: Matrix,
    /// `D x d_z`, target encoder.
    pub target: Matrix,
    /// `d_z x d_z`, ground-truth composition `z_t = z_r + M z_m`.
    pub mixing: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub config: GeneratorConfig,
    pub maps: ProjectionMaps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriplet {
    pub reference: Vec<f64>,
    pub modification: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub id: usize,
    pub f_r: Matrix,
    pub f_m: Matrix,
    pub f_t: Matrix,
    pub latent: LatentTriplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    fn has_negatives(self) -> bool {
        !matches!(self, SplitKind::Train)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub samples: Vec<TripletSample>,
    /// `hard_negatives[i]` are the distractors for `samples[i]` (empty for train).
    pub hard_negatives: Vec<Vec<Matrix>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped into batches of `batch_size`, in an order fixed by
    /// `epoch_seed`. The last batch may be short.
    pub fn batch_order(&self, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut stream_rng(epoch_seed, Stream::Shuffle, 0));
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> impl Iterator<Item = Vec<&TripletSample>> + '_ {
        self.batch_order(batch_size, epoch_seed)
            .into_iter()
            .map(move |idx| idx.into_iter().map(|i| &self.samples[i]).collect())
    }

    pub fn batch_count(&self, batch_size: usize) -> usize {
        self.samples.len().div_ceil(batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn draw_latent<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    // f32-representable so the stored latents reproduce the features exactly
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 as f64)
        .collect()
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn encode_rows<R: Rng>(map: &Matrix, latent: &[f64], rows: usize, noise: f64, rng: &mut R) -> Matrix {
    let clean = mat_vec(map, latent);
    let mut data = Vec::with_capacity(rows * clean.len());
    for _ in 0..rows {
        for &c in &clean {
            let eps: f64 = rng.sample(StandardNormal);
            data.push((c + noise * eps) as f32 as f64);
        }
    }
    Matrix::new(rows, clean.len(), data).expect("positive dims")
}

/// Target latent after blending in reference content.
pub fn biased_target(z_r: &[f64], z_t: &[f64], bias: f64) -> Vec<f64> {
    z_t.iter()
        .zip(z_r)
        .map(|(t, r)| (1.0 - bias) * t + bias * r)
        .collect()
}

pub fn compose_latent(mixing: &Matrix, z_r: &[f64], z_m: &[f64]) -> Vec<f64> {
    mat_vec(mixing, z_m).iter().zip(z_r).map(|(a, b)| b + a).collect()
}

fn draw_maps(cfg: &GeneratorConfig) -> ProjectionMaps {
    let mut rng = stream_rng(cfg.seed, Stream::Maps, 0);
    let std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let visual = Matrix::random_normal(cfg.dim, cfg.latent_dim, std, &mut rng);
    let mixing = Matrix::random_normal(cfg.latent_dim, cfg.latent_dim, std, &mut rng);
    let nuisance = Matrix::random_normal(cfg.dim, cfg.latent_dim, std, &mut rng);
    let aligned = visual.matmul(&mixing).expect("conforming");
    let modification = aligned
        .add(&nuisance)
        .expect("same shape")
        .scale(std::f64::consts::FRAC_1_SQRT_2);
    ProjectionMaps {
        reference: visual.clone(),
        modification,
        target: visual,
        mixing,
    }
}

/// Builds the whole dataset in memory.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let maps = draw_maps(cfg);
    let mut next_id = 0usize;
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let count = match kind {
            SplitKind::Train => cfg.train,
            SplitKind::Val => cfg.val,
            SplitKind::Test => cfg.test,
        };
        let mut samples = Vec::with_capacity(count);
        let mut negatives = Vec::with_capacity(count);
        for _ in 0..count {
            let id = next_id;
            next_id += 1;
            let mut rng = stream_rng(cfg.seed, Stream::Sample, id as u64);
            let z_r = draw_latent(&mut rng, cfg.latent_dim);
            let z_m = draw_latent(&mut rng, cfg.latent_dim);
            let z_t = compose_latent(&maps.mixing, &z_r, &z_m);
            let f_r = encode_rows(&maps.reference, &z_r, cfg.queries, cfg.noise, &mut rng);
            let f_m = encode_rows(&maps.modification, &z_m, cfg.queries, cfg.noise, &mut rng);
            let f_t = encode_rows(
                &maps.target,
                &biased_target(&z_r, &z_t, cfg.bias),
                cfg.queries,
                cfg.noise,
                &mut rng,
            );
            let mut hard = Vec::new();
            if kind.has_negatives() {
                for _ in 0..cfg.hard_negatives {
                    let z_alt = draw_latent(&mut rng, cfg.latent_dim);
                    let z_neg = compose_latent(&maps.mixing, &z_r, &z_alt);
                    hard.push(encode_rows(
                        &maps.target,
                        &biased_target(&z_r, &z_neg, cfg.bias),
                        cfg.queries,
                        cfg.noise,
                        &mut rng,
                    ));
                }
            }
            let z_t = z_t.iter().map(|&v| v as f32 as f64).collect();
            samples.push(TripletSample {
                id,
                f_r,
                f_m,
                f_t,
                latent: LatentTriplet {
                    reference: z_r,
                    modification: z_m,
                    target: z_t,
                },
            });
            negatives.push(hard);
        }
        splits.push(Split {
            kind,
            samples,
            hard_negatives: negatives,
        });
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            config: cfg.clone(),
            maps,
        },
        train,
        val,
        test,
    })
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let ds = generate(cfg)?;
    ds.write(dir)?;
    let manifest = ds.manifest.clone();
    Ok((ds, manifest))
}

fn push_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn framed(magic: &[u8; 4], payload: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != magic {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(payload)
}

struct F32Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F32Reader<'_> {
    fn take(&mut self, n: usize) -> Option<Vec<f64>> {
        let end = self.pos + 4 * n;
        if end > self.bytes.len() {
            return None;
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        self.pos = end;
        Some(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        self.take(rows * cols).and_then(|d| Matrix::new(rows, cols, d).ok())
    }
}

impl Dataset {
    pub fn config(&self) -> &GeneratorConfig {
        &self.manifest.config
    }

    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    /// `data.bin`: magic, version, then per split the f32 features in
    /// (sample, [f_r, f_m, f_t], row, col) order, then the payload CRC32.
    pub fn encode_features(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for split in self.splits() {
            for s in &split.samples {
                for m in [&s.f_r, &s.f_m, &s.f_t] {
                    m.data().iter().for_each(|&v| push_f32(&mut payload, v));
                }
            }
        }
        framed(DATA_MAGIC, payload)
    }

    /// `extras.bin`: per split the latents `(z_r, z_m, z_t)` of every sample,
    /// then for val and test the hard negatives in (sample, negative, row, col)
    /// order.
    pub fn encode_extras(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for split in self.splits() {
            for s in &split.samples {
                let l = &s.latent;
                for v in l.reference.iter().chain(&l.modification).chain(&l.target) {
                    push_f32(&mut payload, *v);
                }
            }
            for negs in &split.hard_negatives {
                for m in negs {
                    m.data().iter().for_each(|&v| push_f32(&mut payload, v));
                }
            }
        }
        framed(EXTRAS_MAGIC, payload)
    }

    /// SHA-256 of the encoded feature file, hex.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.encode_features());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        let data_path = dir.join(DATA_FILE);
        fs::write(&data_path, self.encode_features()).map_err(|e| Error::io(&data_path, e))?;
        let extras_path = dir.join(EXTRAS_FILE);
        fs::write(&extras_path, self.encode_extras()).map_err(|e| Error::io(&extras_path, e))?;
        Ok(())
    }
}

/// Reads a dataset directory written by [`Dataset::write`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;

    let data_path = dir.join(DATA_FILE);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let extras_path = dir.join(EXTRAS_FILE);
    let extras = fs::read(&extras_path).map_err(|e| Error::io(&extras_path, e))?;
    let mut features = F32Reader {
        bytes: unframe(DATA_MAGIC, &data, &data_path)?,
        pos: 0,
    };
    let mut aux = F32Reader {
        bytes: unframe(EXTRAS_MAGIC, &extras, &extras_path)?,
        pos: 0,
    };
    let short = |path: &Path| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "payload shorter than the manifest implies".into(),
    };

    let (q, d, dz) = (cfg.queries, cfg.dim, cfg.latent_dim);
    let mut next_id = 0;
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let count = match kind {
            SplitKind::Train => cfg.train,
            SplitKind::Val => cfg.val,
            SplitKind::Test => cfg.test,
        };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let f_r = features.matrix(q, d).ok_or_else(|| short(&data_path))?;
            let f_m = features.matrix(q, d).ok_or_else(|| short(&data_path))?;
            let f_t = features.matrix(q, d).ok_or_else(|| short(&data_path))?;
            let reference = aux.take(dz).ok_or_else(|| short(&extras_path))?;
            let modification = aux.take(dz).ok_or_else(|| short(&extras_path))?;
            let target = aux.take(dz).ok_or_else(|| short(&extras_path))?;
            samples.push(TripletSample {
                id: next_id,
                f_r,
                f_m,
                f_t,
                latent: LatentTriplet {
                    reference,
                    modification,
                    target,
                },
            });
            next_id += 1;
        }
        let mut hard_negatives = Vec::with_capacity(count);
        for _ in 0..count {
            let mut negs = Vec::new();
            if kind.has_negatives() {
                for _ in 0..cfg.hard_negatives {
                    negs.push(aux.matrix(q, d).ok_or_else(|| short(&extras_path))?);
                }
            }
            hard_negatives.push(negs);
        }
        splits.push(Split {
            kind,
            samples,
            hard_negatives,
        });
    }
    if features.pos != features.bytes.len() || aux.pos != aux.bytes.len() {
        return Err(Error::Corrupt {
            path: dir.to_path_buf(),
            reason: "trailing payload bytes".into(),
        });
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        manifest,
        train,
        val,
        test,
    })
}

/// Noise-free target-encoded composed latents `E_t z_t`, one `Q x D` matrix
/// per sample: the best any composer could output.
pub fn latent_oracle_queries(ds: &Dataset, split: SplitKind) -> Vec<Matrix> {
    let cfg = ds.config();
    ds.split(split)
        .samples
        .iter()
        .map(|s| {
            let z = biased_target(&s.latent.reference, &s.latent.target, cfg.bias);
            let row = mat_vec(&ds.manifest.maps.target, &z);
            let rows: Vec<Vec<f64>> = (0..cfg.queries).map(|_| row.clone()).collect();
            Matrix::from_rows(&rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            train: 20,
            val: 6,
            test: 7,
            seed: 5,
            ..GeneratorConfig::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn noiseless_target_matches_composition_rule() {
        let cfg = GeneratorConfig {
            noise: 0.0,
            bias: 0.0,
            queries: 1,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let maps = &ds.manifest.maps;
        for s in &ds.train.samples {
            let z_t = compose_latent(&maps.mixing, &s.latent.reference, &s.latent.modification);
            let expected: Vec<f64> = mat_vec(&maps.target, &z_t).iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(s.f_t.row(0), expected.as_slice());
        }
    }

    #[test]
    fn rows_share_latent() {
        let ds = generate(&GeneratorConfig { noise: 0.0, ..small() }).unwrap();
        let s = &ds.train.samples[0];
        for r in 1..s.f_r.rows() {
            assert_eq!(s.f_r.row(r), s.f_r.row(0));
        }
    }

    #[test]
    fn full_bias_targets_look_like_references() {
        let cfg = GeneratorConfig {
            bias: 1.0,
            train: 100,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let maps = &ds.manifest.maps;
        let (mut to_ref, mut to_composed) = (0.0, 0.0);
        for s in &ds.train.samples {
            let composed = mat_vec(&maps.target, &s.latent.target);
            to_ref += cosine(s.f_t.row(0), s.f_r.row(0));
            to_composed += cosine(s.f_t.row(0), &composed);
        }
        assert!(to_ref > to_composed, "{to_ref} vs {to_composed}");
    }

    #[test]
    fn batches_cover_split() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.batch_count(6), 4);
        let order = ds.train.batch_order(6, 0);
        assert_eq!(order.len(), 4);
        assert_eq!(order.last().unwrap().len(), 2);
        let mut all: Vec<usize> = order.concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(ds.train.batch_order(6, 0), order);
        assert_ne!(ds.train.batch_order(6, 1), order);
    }

    #[test]
    fn negatives_only_on_eval_splits() {
        let ds = generate(&small()).unwrap();
        assert!(ds.train.hard_negatives.iter().all(|n| n.is_empty()));
        assert!(ds.test.hard_negatives.iter().all(|n| n.len() == 3));
    }

    #[test]
    fn rejects_bad_dimensions() {
        for cfg in [
            GeneratorConfig { latent_dim: 1, ..small() },
            GeneratorConfig { dim: 1, ..small() },
            GeneratorConfig { queries: 0, ..small() },
            GeneratorConfig { test: 0, ..small() },
            GeneratorConfig { bias: 1.5, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn ids_are_unique_and_sequential() {
        let ds = generate(&small()).unwrap();
        let ids: Vec<usize> = ds.splits().iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
        assert_eq!(ids, (0..33).collect::<Vec<_>>());
    }
}
