//! Central finite-difference gradient checking.
//!
//! The error metric for every entry is
//! `|analytic - numeric| / max(1, |numeric|)`; the report keeps the maximum.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Largest relative error per output.
    pub max_rel_error: Vec<f64>,
    /// Number of parameter entries probed.
    pub entries: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_outputs<F>(f: &F, params: &[Matrix]) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let values: Vec<f64> = outs.iter().map(|&o| tape.value(o).item()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "gradcheck probe" });
    }
    Ok(values)
}

/// Checks several scalar outputs of one program at once: every probe is a
/// single forward evaluation shared by all outputs.
pub fn gradcheck_many<F>(f: F, params: &[Matrix], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("gradcheck step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let outs = f(&mut tape, &vars)?;
    let mut analytic = Vec::with_capacity(outs.len());
    for &o in &outs {
        if !tape.is_tracked(o) {
            analytic.push(vars.iter().map(|&v| Matrix::zeros(tape.value(v).rows(), tape.value(v).cols())).collect::<Vec<_>>());
            continue;
        }
        let grads = tape.backward(o)?;
        analytic.push(vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>());
    }
    drop(tape);

    let mut max_rel = vec![0.0f64; outs.len()];
    let mut probe = params.to_vec();
    let mut entries = 0;
    for p in 0..params.len() {
        for idx in 0..params[p].len() {
            let orig = params[p].data()[idx];
            probe[p].data_mut()[idx] = orig + h;
            let plus = eval_outputs(&f, &probe)?;
            probe[p].data_mut()[idx] = orig - h;
            let minus = eval_outputs(&f, &probe)?;
            probe[p].data_mut()[idx] = orig;
            for (o, worst) in max_rel.iter_mut().enumerate() {
                let numeric = (plus[o] - minus[o]) / (2.0 * h);
                let err = rel_error(analytic[o][p].data()[idx], numeric);
                *worst = worst.max(err);
            }
            entries += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        entries,
    })
}

/// Maximum relative error between the tape gradient of a scalar program and
/// central differences with step `h`.
pub fn gradcheck<F>(f: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = gradcheck_many(|t, v| f(t, v).map(|o| vec![o]), params, h)?;
    Ok(report.max_rel_error[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::NormGuard;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn quadratic() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap().wrt(v);
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
        let err = gradcheck(
            |t, p| {
                let sq = t.mul(p[0], p[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_finite_probe() {
        let x = Matrix::from_rows(&[[0.0]]);
        let r = gradcheck(
            |t, p| {
                let r = t.recip(p[0])?;
                t.sum(r)
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }

    type Program = fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Every differentiable primitive, each wrapped to a scalar through a
    /// random linear functional so the upstream gradient is not uniform.
    fn programs() -> Vec<(&'static str, Vec<(usize, usize)>, Program)> {
        fn weigh(t: &mut Tape, x: Var) -> Result<Var> {
            let (r, c) = t.value(x).shape();
            let w = t.constant(Matrix::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(99)));
            let y = t.mul(x, w)?;
            t.sum(y)
        }
        vec![
            ("matmul", vec![(3, 4), (4, 2)], |t, p| {
                let y = t.matmul(p[0], p[1])?;
                weigh(t, y)
            }),
            ("matmul_nt", vec![(3, 4), (5, 4)], |t, p| {
                let y = t.matmul_nt(p[0], p[1])?;
                weigh(t, y)
            }),
            ("transpose", vec![(3, 4)], |t, p| {
                let y = t.transpose(p[0])?;
                weigh(t, y)
            }),
            ("add_sub_mul", vec![(3, 4), (3, 4)], |t, p| {
                let a = t.add(p[0], p[1])?;
                let b = t.sub(a, p[1])?;
                let c = t.mul(b, p[1])?;
                weigh(t, c)
            }),
            ("row_broadcast", vec![(3, 4), (1, 4), (1, 4)], |t, p| {
                let a = t.mul_row(p[0], p[1])?;
                let b = t.add_row(a, p[2])?;
                weigh(t, b)
            }),
            ("scale_shift", vec![(3, 4)], |t, p| {
                let a = t.scale(p[0], -1.7)?;
                let b = t.add_scalar(a, 0.3)?;
                weigh(t, b)
            }),
            ("activations", vec![(3, 4)], |t, p| {
                let a = t.exp(p[0])?;
                let b = t.softplus(p[0])?;
                let c = t.sigmoid(p[0])?;
                let d = t.relu(p[0])?;
                let s1 = t.add(a, b)?;
                let s2 = t.add(c, d)?;
                let s = t.add(s1, s2)?;
                weigh(t, s)
            }),
            ("recip", vec![(2, 3)], |t, p| {
                let sq = t.mul(p[0], p[0])?;
                let a = t.add_scalar(sq, 1.0)?;
                let r = t.recip(a)?;
                weigh(t, r)
            }),
            ("reductions", vec![(4, 3)], |t, p| {
                let a = t.row_sums(p[0])?;
                let b = t.block_sums(p[0], 2)?;
                let c = t.row_max(p[0])?;
                let m = t.mean(p[0])?;
                let s1 = weigh(t, a)?;
                let s2 = weigh(t, b)?;
                let s3 = weigh(t, c)?;
                let s = t.add(s1, s2)?;
                let s = t.add(s, s3)?;
                t.add(s, m)
            }),
            ("concat_slice", vec![(2, 3), (3, 3), (2, 2)], |t, p| {
                let a = t.concat_rows(&[p[0], p[1]])?;
                let b = t.concat_cols(&[p[0], p[2]])?;
                let c = t.slice_rows(a, 1, 3)?;
                let d = t.slice_cols(b, 2, 3)?;
                let s1 = weigh(t, c)?;
                let s2 = weigh(t, d)?;
                t.add(s1, s2)
            }),
            ("softmax_rows", vec![(3, 5)], |t, p| {
                let y = t.softmax_rows(p[0])?;
                weigh(t, y)
            }),
            ("layer_norm", vec![(3, 6)], |t, p| {
                let y = t.layer_norm(p[0], 1e-5)?;
                weigh(t, y)
            }),
            ("l2_normalize", vec![(3, 4)], |t, p| {
                let (y, _) = t.l2_normalize(p[0], 1e-12, NormGuard::Reject)?;
                weigh(t, y)
            }),
            ("token_max_mean", vec![(6, 4), (4, 4)], |t, p| {
                let s = t.matmul_nt(p[0], p[1])?;
                let y = t.token_max_mean(s, 3, 2)?;
                weigh(t, y)
            }),
            ("softmax_xent", vec![(3, 3)], |t, p| t.softmax_xent(p[0], &[0, 2, 1])),
            ("diag", vec![(3, 3)], |t, p| {
                let y = t.diag(p[0])?;
                weigh(t, y)
            }),
            ("block_matmul_nt", vec![(6, 4), (4, 4)], |t, p| {
                let y = t.block_matmul_nt(p[0], p[1], 3, 2)?;
                weigh(t, y)
            }),
            ("block_attention", vec![(6, 8), (4, 8), (4, 8)], |t, p| {
                let y = t.block_attention(p[0], p[1], p[2], 2, 3, 2)?;
                weigh(t, y)
            }),
            ("affine", vec![(3, 4), (4, 5), (1, 5)], |t, p| {
                let y = t.affine(p[0], p[1], p[2])?;
                weigh(t, y)
            }),
        ]
    }

    #[test]
    fn every_primitive_passes_over_ten_seeds() {
        for (name, shapes, program) in programs() {
            for seed in 0..10u64 {
                let params: Vec<Matrix> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, &(r, c))| rand_m(r, c, seed * 31 + i as u64))
                    .collect();
                let err = gradcheck(program, &params, DEFAULT_STEP).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(rand_m(3, 4, 1));
        let b = tape.param(rand_m(4, 2, 2));
        let y = tape.matmul(a, b).unwrap();
        let z = tape.softplus(y).unwrap();
        let grads = tape.backward_with(z, Matrix::zeros(3, 2)).unwrap();
        assert!(grads.wrt(a).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(rand_m(2, 2, 1));
        let c = tape.constant(rand_m(2, 2, 2));
        let y = tape.mul(a, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(rand_m(2, 2, 1));
        let d = tape.detach(a);
        let y = tape.mul(a, d).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(a);
        assert!(g.max_abs_diff(tape.value(a)) < 1e-15);
    }

    #[test]
    fn row_max_tie_takes_lowest_index() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[[1.0, 2.0, 2.0]]));
        let m = tape.row_max(a).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap().wrt(a);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[[2.0]]));
        let b = tape.add(a, a).unwrap();
        let c = tape.mul(b, a).unwrap();
        let g = tape.backward(c).unwrap().wrt(a);
        // d/da (2a * a) = 4a
        assert_eq!(g.item(), 8.0);
    }

    #[test]
    fn clamped_normalization_counts_rows() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
        let (_, n) = tape.l2_normalize(a, 1e-9, NormGuard::Clamp).unwrap();
        assert_eq!(n, 1);
        assert!(tape.l2_normalize(a, 1e-9, NormGuard::Reject).is_err());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_rows(&[[1000.0]]));
        assert!(matches!(tape.exp(a), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn identical_inputs_bit_identical_outputs() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(rand_m(6, 8, 3));
            let k = tape.param(rand_m(4, 8, 4));
            let y = tape.block_attention(a, k, k, 2, 3, 2).unwrap();
            let z = tape.layer_norm(y, 1e-5).unwrap();
            let s = tape.sum(z).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(z).clone(), g.wrt(a), g.wrt(k))
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
        assert_eq!(c1.data(), c2.data());
    }
}
