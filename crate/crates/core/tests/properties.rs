use proptest::prelude::*;

use volmin_core::linalg::{inverse, matmul, nnls, signed_logdet};
use volmin_core::noise::{build_transition, estimation_error, NoiseSpec};
use volmin_core::{Matrix, TrainableTransition};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn square_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (2usize..7).prop_flat_map(|n| (matrix(n, n), matrix(n, n)))
}

fn weights() -> impl Strategy<Value = Matrix> {
    (2usize..12).prop_flat_map(|c| {
        prop::collection::vec(-40.0f64..40.0, c * c).prop_map(move |v| Matrix::new(c, c, v).unwrap())
    })
}

fn permute(t: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(t.rows(), t.cols(), |i, j| t[(perm[i], perm[j])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_is_associative(n in 1usize..6, m in 1usize..6, k in 1usize..6, p in 1usize..6, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = Matrix::from_fn(n, m, |_, _| next());
        let b = Matrix::from_fn(m, k, |_, _| next());
        let c = Matrix::from_fn(k, p, |_, _| next());
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
    }

    #[test]
    fn logdet_of_product_combines((a, b) in square_pair()) {
        let da = signed_logdet(&a).unwrap();
        let db = signed_logdet(&b).unwrap();
        prop_assume!(da.sign != 0 && db.sign != 0 && da.log_abs > -20.0 && db.log_abs > -20.0);
        let dab = signed_logdet(&matmul(&a, &b).unwrap()).unwrap();
        let combined = da.combine(db);
        prop_assert_eq!(dab.sign, combined.sign);
        prop_assert!((dab.log_abs - combined.log_abs).abs() < 1e-8 * (1.0 + combined.log_abs.abs()));
    }

    #[test]
    fn inverse_round_trips((a, _) in square_pair()) {
        let d = signed_logdet(&a).unwrap();
        prop_assume!(d.sign != 0 && d.log_abs > -6.0);
        let inv = inverse(&a).unwrap();
        let id = matmul(&a, &inv).unwrap();
        prop_assert!(id.max_abs_diff(&Matrix::identity(a.rows())) < 1e-8);
    }

    #[test]
    fn nnls_is_feasible_and_no_worse_than_zero(a in matrix(4, 6), b in prop::collection::vec(-2.0f64..2.0, 4)) {
        let sol = nnls(&a, &b, 1e-12).unwrap();
        prop_assert!(sol.alpha.iter().all(|v| *v >= 0.0));
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(sol.residual <= bn + 1e-12);
    }

    #[test]
    fn realized_transition_is_stochastic_and_dominant(w in weights()) {
        let t = TrainableTransition::new(w).unwrap().realize();
        prop_assert!(t.column_sum_error() <= 1e-12);
        prop_assert!(t.dominance_margin() > 0.0);
        prop_assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn realize_commutes_with_relabeling(w in weights(), seed in any::<u64>()) {
        let c = w.rows();
        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let direct = permute(TrainableTransition::new(w.clone()).unwrap().realize().matrix(), &perm);
        let relabeled = TrainableTransition::new(permute(&w, &perm)).unwrap().realize();
        prop_assert!(direct.max_abs_diff(relabeled.matrix()) < 1e-15);
    }

    #[test]
    fn noise_builders_are_valid(c in 2usize..15, r in 0.0f64..1.0) {
        let sym_rate = r * (c as f64 - 1.0) / c as f64 * 0.999;
        let t = build_transition(&NoiseSpec::Symmetric { rate: sym_rate, classes: c }).unwrap();
        prop_assert!(t.column_sum_error() < 1e-12);
        let pair = build_transition(&NoiseSpec::Pair { rate: r * 0.499, classes: c }).unwrap();
        prop_assert!(pair.column_sum_error() < 1e-12);
        prop_assert!(pair.dominance_margin() > 0.0);
    }

    #[test]
    fn estimation_error_is_relabeling_invariant(w1 in weights(), seed in any::<u64>()) {
        let c = w1.rows();
        let t = TrainableTransition::new(w1.clone()).unwrap().realize();
        let est = TrainableTransition::new(w1.transpose()).unwrap().realize();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.rotate_left((seed % c as u64) as usize);
        let e = estimation_error(t.matrix(), est.matrix()).unwrap();
        let ep = estimation_error(&permute(t.matrix(), &perm), &permute(est.matrix(), &perm)).unwrap();
        prop_assert!((e - ep).abs() < 1e-12);
        prop_assert!(e >= 0.0);
        prop_assert_eq!(estimation_error(t.matrix(), t.matrix()).unwrap(), 0.0);
    }
}
