use proptest::prelude::*;

use retrack::dst::{brute_force_combine, combine_all, dempster_combine, random_mass};
use retrack::eval::{rank_scores, recall_at_k};
use retrack::evidence::{belief_and_reliability, evidence_to_dirichlet, EvidenceStream};
use retrack::geometry::contrastive_from_table;
use retrack::rng::{stream_rng, Stream};
use retrack::{Matrix, Tape};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn square_table() -> impl Strategy<Value = Matrix> {
    (2usize..12).prop_flat_map(|b| prop::collection::vec(-1.0f64..1.0, b * b).prop_map(move |d| Matrix::new(b, b, d).unwrap()))
}

fn evidence() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5e4, 1..48)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_associates((a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, n, p, q)| (matrix(m, n), matrix(n, p), matrix(p, q))))
    {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c)), scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let v = tape.constant(x.scale(scale));
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn belief_and_uncertainty_partition_unit_mass(e in evidence()) {
        let r = belief_and_reliability(&e, EvidenceStream::Modification).unwrap();
        prop_assert!((r.b.iter().sum::<f64>() + r.u - 1.0).abs() <= 1e-12);
        prop_assert!(r.reliability >= 0.0 && r.reliability < 1.0);
        let d = evidence_to_dirichlet(&e).unwrap();
        prop_assert!((d.reliability() - r.reliability).abs() <= 1e-12);
    }

    #[test]
    fn reliability_strictly_increases_in_each_channel(e in prop::collection::vec(0.0f64..100.0, 1..16), bump in 0.01f64..10.0) {
        let base = belief_and_reliability(&e, EvidenceStream::Reference).unwrap().reliability;
        for q in 0..e.len() {
            let mut up = e.clone();
            up[q] += bump;
            let next = belief_and_reliability(&up, EvidenceStream::Reference).unwrap().reliability;
            prop_assert!(next > base);
        }
    }

    #[test]
    fn dempster_iterated_equals_enumeration(seed in any::<u64>(), frame in 1usize..=4, n in 2usize..=5) {
        let mut rng = stream_rng(seed, Stream::Sample, 0);
        let sources: Vec<_> = (0..n).map(|_| random_mass(frame, &mut rng).unwrap()).collect();
        let iterated = combine_all(&sources).unwrap();
        let (brute, _) = brute_force_combine(&sources).unwrap();
        prop_assert!(iterated.max_diff(&brute) <= 1e-12);
        let (ab, _) = dempster_combine(&sources[0], &sources[1]).unwrap();
        let (ba, _) = dempster_combine(&sources[1], &sources[0]).unwrap();
        prop_assert!(ab.max_diff(&ba) <= 1e-12);
    }

    #[test]
    fn contrastive_is_nonnegative_and_permutation_covariant(table in square_table(), seed in any::<u64>()) {
        let b = table.rows();
        let loss = contrastive_from_table(&table, 0.1).unwrap();
        prop_assert!(loss >= 0.0);
        let mut perm: Vec<usize> = (0..b).collect();
        // Fisher-Yates with a splitmix stream so the case is reproducible from the seed
        let mut s = seed;
        for i in (1..b).rev() {
            s = retrack::rng::splitmix64(s);
            perm.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let mut permuted = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                permuted.set(i, j, table.get(perm[i], perm[j]));
            }
        }
        let again = contrastive_from_table(&permuted, 0.1).unwrap();
        prop_assert!((loss - again).abs() <= 1e-12);
    }

    #[test]
    fn joint_temperature_scaling_is_invariant(table in square_table(), c in 0.2f64..5.0) {
        let loss = contrastive_from_table(&table, 0.1).unwrap();
        let scaled = contrastive_from_table(&table.scale(c), 0.1 * c).unwrap();
        prop_assert!((loss - scaled).abs() <= 1e-10);
    }

    #[test]
    fn ranks_survive_strictly_monotone_transforms(scores in prop::collection::vec(-1.0f64..1.0, 2..40)) {
        let ids: Vec<usize> = (0..scores.len()).collect();
        let base: Vec<usize> = rank_scores(&ids, &scores).into_iter().map(|(i, _)| i).collect();
        for f in [|x: f64| 3.0 * x + 1.0, |x: f64| x.exp(), |x: f64| x.atan(), |x: f64| x * x * x] {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            let ranked: Vec<usize> = rank_scores(&ids, &t).into_iter().map(|(i, _)| i).collect();
            prop_assert_eq!(&ranked, &base);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(lists in prop::collection::vec(Just(()).prop_perturb(|_, mut rng| {
        let mut ids: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        ids
    }), 1..30), target in 0usize..20) {
        let targets = vec![target; lists.len()];
        let ks: Vec<usize> = (1..=20).collect();
        let r = recall_at_k(&lists, &targets, &ks).unwrap();
        for w in r.recall.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(r.recall[19], 1.0);
    }
}
