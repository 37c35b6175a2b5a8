//! Dempster–Shafer combination over small frames.
//!
//! Hypotheses are bits of a `u32`; a subset of the frame is a bitmask. Mass
//! functions store only their non-empty focal sets. This module is an
//! independent check on the subjective-logic closed form used in training,
//! not part of the training path.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const MAX_FRAME: usize = 4;
const SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MassFunction {
    frame: usize,
    masses: BTreeMap<u32, f64>,
}

impl MassFunction {
    pub fn new(frame: usize, masses: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        if frame == 0 || frame > MAX_FRAME {
            return Err(Error::InvalidArgument(format!(
                "frame size must be in 1..={MAX_FRAME}, got {frame}"
            )));
        }
        let full = Self::full_mask(frame);
        let mut table = BTreeMap::new();
        for (set, m) in masses {
            if set == 0 || set & !full != 0 {
                return Err(Error::InvalidArgument(format!(
                    "subset {set:#b} is empty or outside a frame of {frame}"
                )));
            }
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::InvalidArgument(format!("mass must be non-negative, got {m}")));
            }
            if m > 0.0 {
                *table.entry(set).or_insert(0.0) += m;
            }
        }
        let total: f64 = table.values().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidArgument(format!("masses sum to {total}, not 1")));
        }
        Ok(Self { frame, masses: table })
    }

    /// All mass on the whole frame.
    pub fn vacuous(frame: usize) -> Result<Self> {
        Self::new(frame, [(Self::full_mask(frame), 1.0)])
    }

    pub fn full_mask(frame: usize) -> u32 {
        (1u32 << frame) - 1
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn mass(&self, set: u32) -> f64 {
        self.masses.get(&set).copied().unwrap_or(0.0)
    }

    pub fn focal(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.masses.iter().map(|(&s, &m)| (s, m))
    }

    /// Largest per-subset difference over every non-empty subset.
    pub fn max_diff(&self, other: &MassFunction) -> f64 {
        (1..=Self::full_mask(self.frame.max(other.frame)))
            .map(|s| (self.mass(s) - other.mass(s)).abs())
            .fold(0.0, f64::max)
    }
}

fn normalized(frame: usize, raw: BTreeMap<u32, f64>, conflict: f64) -> Result<MassFunction> {
    let keep = 1.0 - conflict;
    if !(keep > SUM_TOL) {
        return Err(Error::TotalConflict { conflict });
    }
    Ok(MassFunction {
        frame,
        masses: raw.into_iter().map(|(s, m)| (s, m / keep)).collect(),
    })
}

/// Dempster's rule. Returns the fused mass and the conflict `K`.
pub fn dempster_combine(m1: &MassFunction, m2: &MassFunction) -> Result<(MassFunction, f64)> {
    if m1.frame != m2.frame {
        return Err(Error::InvalidArgument(format!(
            "frames differ: {} vs {}",
            m1.frame, m2.frame
        )));
    }
    let mut raw = BTreeMap::new();
    let mut conflict = 0.0;
    for (b, mb) in m1.focal() {
        for (c, mc) in m2.focal() {
            let a = b & c;
            if a == 0 {
                conflict += mb * mc;
            } else {
                *raw.entry(a).or_insert(0.0) += mb * mc;
            }
        }
    }
    let fused = normalized(m1.frame, raw, conflict)?;
    Ok((fused, conflict))
}

/// Folds [`dempster_combine`] left to right.
pub fn combine_all(sources: &[MassFunction]) -> Result<MassFunction> {
    let (first, rest) = sources
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("nothing to combine".into()))?;
    rest.iter()
        .try_fold(first.clone(), |acc, m| dempster_combine(&acc, m).map(|(f, _)| f))
}

/// One-shot combination: every tuple of focal sets, one per source,
/// contributes its product to the intersection.
pub fn brute_force_combine(sources: &[MassFunction]) -> Result<(MassFunction, f64)> {
    let frame = sources
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to combine".into()))?
        .frame;
    if sources.iter().any(|m| m.frame != frame) {
        return Err(Error::InvalidArgument("frames differ".into()));
    }
    let focal: Vec<Vec<(u32, f64)>> = sources.iter().map(|m| m.focal().collect()).collect();
    let mut idx = vec![0usize; sources.len()];
    let mut raw = BTreeMap::new();
    let mut conflict = 0.0;
    'outer: loop {
        let mut set = MassFunction::full_mask(frame);
        let mut prod = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            set &= focal[k][i].0;
            prod *= focal[k][i].1;
        }
        if set == 0 {
            conflict += prod;
        } else {
            *raw.entry(set).or_insert(0.0) += prod;
        }
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < focal[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    let fused = normalized(frame, raw, conflict)?;
    Ok((fused, conflict))
}

/// A random mass function that always keeps some mass on the whole frame,
/// so any number of them can be fused.
pub fn random_mass<R: Rng>(frame: usize, rng: &mut R) -> Result<MassFunction> {
    let full = MassFunction::full_mask(frame);
    let focal_count = rng.random_range(1..=full as usize);
    let mut raw: Vec<(u32, f64)> = (0..focal_count)
        .map(|_| (rng.random_range(1..=full), rng.random::<f64>() + 0.01))
        .collect();
    raw.push((full, rng.random::<f64>() + 0.05));
    let total: f64 = raw.iter().map(|(_, m)| m).sum();
    let mut scaled: Vec<(u32, f64)> = raw.into_iter().map(|(s, m)| (s, m / total)).collect();
    // absorb rounding into the last entry so the sum is 1 to machine precision
    let sum: f64 = scaled.iter().map(|(_, m)| m).sum();
    if let Some(last) = scaled.last_mut() {
        last.1 += 1.0 - sum;
    }
    MassFunction::new(frame, scaled)
}

#[derive(Clone, Debug, Serialize)]
pub struct DstSelfTest {
    pub trials: usize,
    pub worked_example_conflict: f64,
    pub worked_example_mass: f64,
    pub max_pairwise_vs_brute: f64,
    pub max_commutativity: f64,
    pub max_associativity: f64,
    pub max_vacuous_identity: f64,
    pub total_conflict_rejected: bool,
    pub passed: bool,
}

impl DstSelfTest {
    pub fn max_deviation(&self) -> f64 {
        [
            self.max_pairwise_vs_brute,
            self.max_commutativity,
            self.max_associativity,
            self.max_vacuous_identity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// `m1 = {A: 0.6, ¬A: 0.4}`, `m2 = {A: 0.7, ¬A: 0.3}` over a two-element frame.
pub fn worked_example() -> Result<(MassFunction, f64)> {
    let m1 = MassFunction::new(2, [(0b01, 0.6), (0b10, 0.4)])?;
    let m2 = MassFunction::new(2, [(0b01, 0.7), (0b10, 0.3)])?;
    dempster_combine(&m1, &m2)
}

/// Randomized equivalence, commutativity and associativity checks for frames
/// up to four hypotheses and up to five sources.
pub fn self_test(seed: u64, trials: usize) -> Result<DstSelfTest> {
    let mut rng = stream_rng(seed, Stream::Sample, u64::MAX);
    let (mut pairwise, mut comm, mut assoc, mut vac) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let frame = rng.random_range(1..=MAX_FRAME);
        let n = rng.random_range(2..=5);
        let sources: Vec<MassFunction> = (0..n)
            .map(|_| random_mass(frame, &mut rng))
            .collect::<Result<_>>()?;
        let iterated = combine_all(&sources)?;
        let (brute, _) = brute_force_combine(&sources)?;
        pairwise = pairwise.max(iterated.max_diff(&brute));

        let (ab, k_ab) = dempster_combine(&sources[0], &sources[1])?;
        let (ba, k_ba) = dempster_combine(&sources[1], &sources[0])?;
        comm = comm.max(ab.max_diff(&ba)).max((k_ab - k_ba).abs());

        if n >= 3 {
            let left = dempster_combine(&ab, &sources[2])?.0;
            let (bc, _) = dempster_combine(&sources[1], &sources[2])?;
            let right = dempster_combine(&sources[0], &bc)?.0;
            assoc = assoc.max(left.max_diff(&right));
        }

        let (same, k) = dempster_combine(&sources[0], &MassFunction::vacuous(frame)?)?;
        vac = vac.max(same.max_diff(&sources[0])).max(k.abs());
    }

    let (fused, k) = worked_example()?;
    let a = fused.mass(0b01);
    let disjoint = dempster_combine(
        &MassFunction::new(2, [(0b01, 1.0)])?,
        &MassFunction::new(2, [(0b10, 1.0)])?,
    );
    let rejected = matches!(disjoint, Err(Error::TotalConflict { conflict }) if conflict == 1.0);
    let mut report = DstSelfTest {
        trials,
        worked_example_conflict: k,
        worked_example_mass: a,
        max_pairwise_vs_brute: pairwise,
        max_commutativity: comm,
        max_associativity: assoc,
        max_vacuous_identity: vac,
        total_conflict_rejected: rejected,
        passed: false,
    };
    report.passed = report.max_deviation() < 1e-12
        && (k - 0.46).abs() < 1e-12
        && (a - 0.42 / 0.54).abs() < 1e-9
        && rejected;
    Ok(report)
}
