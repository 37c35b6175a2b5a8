//! One batch through the whole objective:
//! compose, disentangle, gate, anchor, then `L_dis + κ L_dir + λ L_evi`.

use serde::{Deserialize, Serialize};

use crate::composer::{anchor, Net};
use crate::data::TripletSample;
use crate::error::{Error, Result};
use crate::evidence::{loss_evi_tape, Activation, BatchEvidence, StopGrad};
use crate::geometry::{contrastive, BatchSimilarity, SimilarityConfig};
use crate::matrix::Matrix;
use crate::tape::{NormGuard, Tape, Var};

/// Component switches. Field names follow the variant labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the reference contribution: `A_r = F_c`.
    #[serde(rename = "wo_C_ref")]
    pub wo_c_ref: bool,
    #[serde(rename = "wo_C_mod")]
    pub wo_c_mod: bool,
    /// Use raw features as contributions instead of decoding them.
    #[serde(rename = "wo_SCD")]
    pub wo_scd: bool,
    #[serde(rename = "wo_Ldis")]
    pub wo_ldis: bool,
    /// Drop the reference direction from `A_c`.
    #[serde(rename = "wo_A_ref")]
    pub wo_a_ref: bool,
    #[serde(rename = "wo_A_mod")]
    pub wo_a_mod: bool,
    #[serde(rename = "wo_Ldir")]
    pub wo_ldir: bool,
    /// Drop the reference squared term of the evidence loss.
    #[serde(rename = "wo_Evi_ref")]
    pub wo_evi_ref: bool,
    #[serde(rename = "wo_Evi_mod")]
    pub wo_evi_mod: bool,
    #[serde(rename = "wo_Levi")]
    pub wo_levi: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 10] = [
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
    ];

    pub fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "wo_C_ref" => &mut self.wo_c_ref,
            "wo_C_mod" => &mut self.wo_c_mod,
            "wo_SCD" => &mut self.wo_scd,
            "wo_Ldis" => &mut self.wo_ldis,
            "wo_A_ref" => &mut self.wo_a_ref,
            "wo_A_mod" => &mut self.wo_a_mod,
            "wo_Ldir" => &mut self.wo_ldir,
            "wo_Evi_ref" => &mut self.wo_evi_ref,
            "wo_Evi_mod" => &mut self.wo_evi_mod,
            "wo_Levi" => &mut self.wo_levi,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.wo_scd && (self.wo_c_ref || self.wo_c_mod) {
            return bad("wo_SCD cannot be combined with wo_C_ref or wo_C_mod");
        }
        if self.wo_c_ref && self.wo_c_mod {
            return bad("wo_C_ref and wo_C_mod together leave no contribution");
        }
        if self.wo_a_ref && self.wo_a_mod {
            return bad("wo_A_ref and wo_A_mod together leave no composition direction");
        }
        if self.wo_evi_ref && self.wo_evi_mod {
            return bad("wo_Evi_ref and wo_Evi_mod together empty the evidence loss; use wo_Levi");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kappa: f64,
    pub lambda: f64,
    pub tau: f64,
    pub similarity: SimilarityConfig,
    pub activation: Activation,
    pub stop_grad: StopGrad,
    pub ablation: Ablation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            lambda: 1.0,
            tau: 0.1,
            similarity: SimilarityConfig::default(),
            activation: Activation::Exp,
            stop_grad: StopGrad::None,
            ablation: Ablation::default(),
        }
    }
}

/// A batch stacked into `BQ x D` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub f_r: Matrix,
    pub f_m: Matrix,
    pub f_t: Matrix,
    pub size: usize,
}

impl BatchInput {
    pub fn from_samples(samples: &[&TripletSample]) -> Result<Self> {
        let stack = |f: fn(&TripletSample) -> &Matrix| {
            Matrix::concat_rows(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(Self {
            f_r: stack(|s| &s.f_r)?,
            f_m: stack(|s| &s.f_m)?,
            f_t: stack(|s| &s.f_t)?,
            size: samples.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dis: f64,
    pub dir: f64,
    pub evi: f64,
}

/// Intermediate nodes, `None` where a path was skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct Activations {
    pub f_c: Option<Var>,
    pub p_r: Option<Var>,
    pub p_m: Option<Var>,
    pub w_r: Option<Var>,
    pub w_m: Option<Var>,
    pub a_r: Option<Var>,
    pub a_m: Option<Var>,
    pub a_c: Option<Var>,
    pub a_t: Option<Var>,
    pub rel_r: Option<Var>,
    pub rel_m: Option<Var>,
    pub sim_pair: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub total: Var,
    pub dis: Option<Var>,
    pub dir: Option<Var>,
    pub evi: Option<Var>,
    pub nodes: Activations,
    /// Near-zero direction rows replaced by the epsilon guard.
    pub clamped_directions: usize,
}

impl ForwardOutput {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            total: tape.value(self.total).item(),
            dis: val(self.dis),
            dir: val(self.dir),
            evi: val(self.evi),
        }
    }
}

fn term<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::Divergence { term: name },
        other => other,
    })
}

struct Branch {
    anchor: Var,
    p: Option<Var>,
    w: Option<Var>,
}

fn branch(
    tape: &mut Tape,
    net: &Net,
    f_c: Var,
    f_x: Var,
    dropped: bool,
    raw: bool,
    mlp: crate::composer::PointWeightIdx,
) -> Result<Branch> {
    if dropped {
        return Ok(Branch {
            anchor: f_c,
            p: None,
            w: None,
        });
    }
    let p = if raw { f_x } else { net.disentangle(tape, f_x, f_c)? };
    let w = net.point_weights(tape, f_c, f_x, mlp)?;
    Ok(Branch {
        anchor: anchor(tape, f_c, w, p)?,
        p: Some(p),
        w: Some(w),
    })
}

/// Builds the full objective for one batch on `tape`.
pub fn forward(tape: &mut Tape, net: &Net, batch: &BatchInput, cfg: &LossConfig) -> Result<ForwardOutput> {
    cfg.ablation.validate()?;
    let ab = cfg.ablation;
    let q = net.config.queries;
    let f_r = tape.constant(batch.f_r.clone());
    let f_m = tape.constant(batch.f_m.clone());
    let f_t = tape.constant(batch.f_t.clone());
    let f_c = term("composer", net.compose(tape, f_r, f_m))?;
    let mut nodes = Activations {
        f_c: Some(f_c),
        ..Activations::default()
    };

    let need_anchors = !ab.wo_ldir || !ab.wo_levi;
    let (mut a_r, mut a_m) = (f_c, f_c);
    if need_anchors {
        let r = term(
            "anchors",
            branch(tape, net, f_c, f_r, ab.wo_c_ref, ab.wo_scd, net.layout.weight_ref),
        )?;
        let m = term(
            "anchors",
            branch(tape, net, f_c, f_m, ab.wo_c_mod, ab.wo_scd, net.layout.weight_mod),
        )?;
        (a_r, a_m) = (r.anchor, m.anchor);
        nodes.p_r = r.p;
        nodes.w_r = r.w;
        nodes.p_m = m.p;
        nodes.w_m = m.w;
        nodes.a_r = Some(a_r);
        nodes.a_m = Some(a_m);
    }

    let features = BatchSimilarity {
        cfg: cfg.similarity,
        queries: q,
        guard: NormGuard::Reject,
    };
    let need_pair = !ab.wo_ldis || !ab.wo_levi;
    let (fc_n, ft_n) = if need_pair {
        (Some(features.prepare(tape, f_c)?), Some(features.prepare(tape, f_t)?))
    } else {
        (None, None)
    };

    let dis = if ab.wo_ldis {
        None
    } else {
        let (x, y) = (fc_n.expect("prepared"), ft_n.expect("prepared"));
        Some(term("L_dis", {
            features
                .table(tape, x, y)
                .and_then(|t| contrastive(tape, t, cfg.tau))
        })?)
    };

    let mut clamped_directions = 0;
    let dir = if ab.wo_ldir {
        None
    } else {
        let v = term("L_dir", {
            (|| {
                let d_r = tape.sub(a_r, f_c)?;
                let d_m = tape.sub(a_m, f_c)?;
                let a_c = match (ab.wo_a_ref, ab.wo_a_mod) {
                    (false, false) => tape.add(d_r, d_m)?,
                    (true, _) => d_m,
                    (_, true) => d_r,
                };
                let a_t = tape.sub(f_t, f_c)?;
                nodes.a_c = Some(a_c);
                nodes.a_t = Some(a_t);
                let directions = BatchSimilarity {
                    guard: NormGuard::Clamp,
                    ..features
                };
                let x = directions.prepare(tape, a_c)?;
                let y = directions.prepare(tape, a_t)?;
                clamped_directions = x.clamped + y.clamped;
                let t = directions.table(tape, x, y)?;
                contrastive(tape, t, cfg.tau)
            })()
        })?;
        Some(v)
    };

    let evi = if ab.wo_levi {
        None
    } else {
        let v = term("L_evi", {
            (|| {
                let (t_unit, _) = tape.l2_normalize(f_t, cfg.similarity.eps, NormGuard::Reject)?;
                let be = BatchEvidence {
                    queries: q,
                    tau: cfg.tau,
                    activation: cfg.activation,
                    eps: cfg.similarity.eps,
                    guard: NormGuard::Clamp,
                };
                let rel_r = if ab.wo_evi_ref {
                    None
                } else {
                    Some(be.reliability(tape, a_r, t_unit)?.reliability)
                };
                let rel_m = if ab.wo_evi_mod {
                    None
                } else {
                    Some(be.reliability(tape, a_m, t_unit)?.reliability)
                };
                let sim = features.paired(tape, fc_n.expect("prepared"), ft_n.expect("prepared"))?;
                nodes.rel_r = rel_r;
                nodes.rel_m = rel_m;
                nodes.sim_pair = Some(sim);
                loss_evi_tape(tape, rel_r, rel_m, sim, cfg.stop_grad)
            })()
        })?;
        Some(v)
    };

    let total = term("total", {
        (|| {
            let mut acc: Option<Var> = dis;
            for (v, w) in [(dir, cfg.kappa), (evi, cfg.lambda)] {
                if let Some(v) = v {
                    let s = tape.scale(v, w)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, s)?,
                        None => s,
                    });
                }
            }
            Ok(match acc {
                Some(a) => a,
                None => tape.constant(Matrix::scalar(0.0)),
            })
        })()
    })?;

    Ok(ForwardOutput {
        total,
        dis,
        dir,
        evi,
        nodes,
        clamped_directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{ComposerParams, ModelConfig};
    use crate::geometry::{loss_dir, loss_dis};
    use crate::evidence::{belief_and_reliability, channel_evidence, loss_evi, EvidenceStream, EvidenceTerms};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ComposerParams, BatchInput) {
        let cfg = ModelConfig::new(4, 8);
        let mut p = ComposerParams::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.perturb(0.1, &mut rng);
        let b = 3;
        let batch = BatchInput {
            f_r: Matrix::random_normal(b * 4, 8, 1.0, &mut rng),
            f_m: Matrix::random_normal(b * 4, 8, 1.0, &mut rng),
            f_t: Matrix::random_normal(b * 4, 8, 1.0, &mut rng),
            size: b,
        };
        (p, batch)
    }

    fn run(p: &ComposerParams, batch: &BatchInput, cfg: &LossConfig) -> (Tape, ForwardOutput, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let out = forward(&mut tape, &Net::new(p, &vars), batch, cfg).unwrap();
        (tape, out, vars)
    }

    #[test]
    fn total_is_weighted_sum() {
        let (p, batch) = setup(1);
        let cfg = LossConfig::default();
        let (tape, out, _) = run(&p, &batch, &cfg);
        let b = out.breakdown(&tape);
        assert!((b.total - (b.dis + 0.5 * b.dir + 1.0 * b.evi)).abs() < 1e-12);
        assert!(b.dis > 0.0 && b.dir > 0.0 && b.evi > 0.0);
    }

    #[test]
    fn zero_weights_leave_distance_term() {
        let (p, batch) = setup(2);
        let cfg = LossConfig {
            kappa: 0.0,
            lambda: 0.0,
            ..LossConfig::default()
        };
        let (tape, out, _) = run(&p, &batch, &cfg);
        let b = out.breakdown(&tape);
        assert_eq!(b.total, b.dis);
    }

    #[test]
    fn doubling_kappa_doubles_direction_share() {
        let (p, batch) = setup(3);
        let one = LossConfig::default();
        let two = LossConfig { kappa: 1.0, ..one };
        let (t1, o1, _) = run(&p, &batch, &one);
        let (t2, o2, _) = run(&p, &batch, &two);
        let (b1, b2) = (o1.breakdown(&t1), o2.breakdown(&t2));
        assert_eq!(b1.dir, b2.dir);
        assert!(((b2.total - b2.dis - b2.evi) - 2.0 * (b1.total - b1.dis - b1.evi)).abs() < 1e-12);
    }

    #[test]
    fn empty_objective_has_no_gradient() {
        let (p, batch) = setup(4);
        let cfg = LossConfig {
            kappa: 0.0,
            lambda: 0.0,
            ablation: Ablation {
                wo_ldis: true,
                ..Ablation::default()
            },
            ..LossConfig::default()
        };
        let (tape, out, vars) = run(&p, &batch, &cfg);
        assert_eq!(out.breakdown(&tape).total, 0.0);
        let g = tape.backward(out.total).unwrap();
        for v in vars {
            assert!(g.wrt(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn terms_match_plain_recomputation() {
        let (p, batch) = setup(5);
        let cfg = LossConfig::default();
        let (tape, out, _) = run(&p, &batch, &cfg);
        let b = out.breakdown(&tape);
        let n = &out.nodes;
        let split = |v: Var| -> Vec<Matrix> { (0..3).map(|i| tape.value(v).slice_rows(i * 4, 4)).collect() };
        let f_c = split(n.f_c.unwrap());
        let f_t: Vec<Matrix> = (0..3).map(|i| batch.f_t.slice_rows(i * 4, 4)).collect();
        assert!((loss_dis(&f_c, &f_t, 0.1, &cfg.similarity).unwrap() - b.dis).abs() < 1e-12);
        let (dir, _) = loss_dir(&split(n.a_c.unwrap()), &split(n.a_t.unwrap()), 0.1, &cfg.similarity).unwrap();
        assert!((dir - b.dir).abs() < 1e-12);

        let (a_r, a_m) = (split(n.a_r.unwrap()), split(n.a_m.unwrap()));
        let mut rr = Vec::new();
        let mut rm = Vec::new();
        let mut s = Vec::new();
        for i in 0..3 {
            let er = channel_evidence(&a_r[i], &f_t[i], 0.1, Activation::Exp).unwrap();
            let em = channel_evidence(&a_m[i], &f_t[i], 0.1, Activation::Exp).unwrap();
            rr.push(belief_and_reliability(&er, EvidenceStream::Reference).unwrap().reliability);
            rm.push(belief_and_reliability(&em, EvidenceStream::Modification).unwrap().reliability);
            s.push(crate::geometry::similarity(&f_c[i], &f_t[i], &cfg.similarity).unwrap());
        }
        let evi = loss_evi(&rr, &rm, &s, EvidenceTerms::default()).unwrap();
        assert!((evi - b.evi).abs() < 1e-12);
    }

    #[test]
    fn parallelogram_identity_on_tape() {
        let (p, batch) = setup(6);
        let (tape, out, _) = run(&p, &batch, &LossConfig::default());
        let n = &out.nodes;
        let v = |x: Option<Var>| tape.value(x.unwrap()).clone();
        let expected = v(n.w_r).hadamard(&v(n.p_r)).unwrap().add(&v(n.w_m).hadamard(&v(n.p_m)).unwrap()).unwrap();
        assert!(v(n.a_c).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn raw_contributions_change_only_contributions() {
        let (p, batch) = setup(7);
        let full = LossConfig::default();
        let raw = LossConfig {
            ablation: Ablation {
                wo_scd: true,
                ..Ablation::default()
            },
            ..full
        };
        let (t1, o1, _) = run(&p, &batch, &full);
        let (t2, o2, _) = run(&p, &batch, &raw);
        let bits = |t: &Tape, v: Option<Var>| t.value(v.unwrap()).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t1, o1.nodes.f_c), bits(&t2, o2.nodes.f_c));
        assert_eq!(bits(&t1, o1.nodes.w_r), bits(&t2, o2.nodes.w_r));
        assert_eq!(bits(&t1, o1.nodes.w_m), bits(&t2, o2.nodes.w_m));
        assert_eq!(t2.value(o2.nodes.p_r.unwrap()), &batch.f_r);
        assert_eq!(t2.value(o2.nodes.p_m.unwrap()), &batch.f_m);
        assert!(t1.len() > t2.len());
    }

    #[test]
    fn dropped_contribution_pins_anchor() {
        let (p, batch) = setup(8);
        let cfg = LossConfig {
            ablation: Ablation {
                wo_c_ref: true,
                ..Ablation::default()
            },
            ..LossConfig::default()
        };
        let (tape, out, _) = run(&p, &batch, &cfg);
        assert_eq!(out.nodes.a_r, out.nodes.f_c);
        assert!(out.nodes.p_r.is_none());
        assert!(tape.value(out.total).item().is_finite());
    }

    #[test]
    fn invalid_combinations_rejected() {
        for (a, b) in [("wo_SCD", "wo_C_ref"), ("wo_C_ref", "wo_C_mod"), ("wo_A_ref", "wo_A_mod"), ("wo_Evi_ref", "wo_Evi_mod")] {
            let mut ab = Ablation::default();
            *ab.flag_mut(a).unwrap() = true;
            *ab.flag_mut(b).unwrap() = true;
            assert!(ab.validate().is_err(), "{a}+{b}");
        }
        assert!(Ablation::default().flag_mut("wo_nothing").is_none());
    }

    #[test]
    fn skipped_terms_are_zero() {
        let (p, batch) = setup(9);
        let cfg = LossConfig {
            ablation: Ablation {
                wo_ldir: true,
                wo_levi: true,
                ..Ablation::default()
            },
            ..LossConfig::default()
        };
        let (tape, out, _) = run(&p, &batch, &cfg);
        let b = out.breakdown(&tape);
        assert_eq!((b.dir, b.evi), (0.0, 0.0));
        assert_eq!(b.total, b.dis);
        assert!(out.nodes.p_r.is_none() && out.nodes.a_r.is_none());
    }
}
