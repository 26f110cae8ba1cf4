use mmldf::dataset::{parse_csv, parse_libsvm, to_libsvm, LabelColumn};
use mmldf::graph::{build_partition, frobenius_inner, laplacian_apply, scatter_value};
use mmldf::numerics::{line_min_sq_hinge, psd_inv, solve_spd};
use mmldf::objective::ProjectionModel;
use mmldf::solver::{center_weights, transform, update_omega};
use mmldf::{fit, Hyperparams, LabeledDataset, LbfgsConfig, SymMatrix, TrainConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0_f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn labels_for(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scatter_is_half_the_pair_sum(
        (z, labels) in sized_matrix(1..12, 1..4)
            .prop_flat_map(|z| { let n = z.nrows(); (Just(z), labels_for(n, 3)) })
    ) {
        let part = build_partition(&labels);
        let mut pairs = 0.0;
        for i in 0..z.nrows() {
            for j in 0..z.nrows() {
                if labels[i] == labels[j] {
                    let diff = &z.row(i) - &z.row(j);
                    pairs += diff.dot(&diff);
                }
            }
        }
        let s = scatter_value(z.view(), &part).unwrap();
        prop_assert!((s - 0.5 * pairs).abs() <= 1e-9 * (1.0 + pairs));
        let lz = laplacian_apply(z.view(), &part).unwrap();
        prop_assert!((frobenius_inner(z.view(), lz.view()) - s).abs() <= 1e-9 * (1.0 + s));
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn omega_has_unit_trace_and_is_psd(w in sized_matrix(1..6, 3..6)) {
        let omega = update_omega(w.view(), 1e-8).unwrap();
        let m = omega.as_array();
        prop_assert!((omega.trace() - 1.0).abs() < 1e-12);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                prop_assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
        // x'Ωx >= 0 on a few directions
        for i in 0..m.nrows() {
            let mut x = Array1::from_elem(m.nrows(), 1.0);
            x[i] = -2.0;
            prop_assert!(x.dot(&m.dot(&x)) >= -1e-12);
        }
    }

    #[test]
    fn spd_solve_has_small_residual(a in sized_matrix(1..8, 1..8), rhs_seed in -2.0..2.0_f64) {
        let n = a.nrows();
        let m = SymMatrix::new(a.dot(&a.t()) + Array2::<f64>::eye(n)).unwrap();
        let rhs = Array2::from_shape_fn((n, 2), |(i, j)| rhs_seed + i as f64 - j as f64);
        let x = solve_spd(&m, &rhs).unwrap();
        let resid = m.as_array().dot(&x) - &rhs;
        let scale = 1.0 + m.max_abs() * x.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
        prop_assert!(resid.iter().all(|v| v.abs() <= 1e-10 * scale));
    }

    #[test]
    fn line_min_is_a_minimum(
        q in 0.0..4.0_f64,
        l in -3.0..3.0_f64,
        c in 0.0..3.0_f64,
        st in prop::collection::vec((-2.0..2.0_f64, -2.0..2.0_f64), 0..8),
    ) {
        let (s, t): (Vec<f64>, Vec<f64>) = st.into_iter().unzip();
        let f = |a: f64| {
            0.5 * q * a * a + l * a
                + c * s.iter().zip(&t).map(|(sj, tj)| (sj - a * tj).max(0.0).powi(2)).sum::<f64>()
        };
        let alpha = line_min_sq_hinge(q, l, c, &s, &t);
        if alpha.is_finite() {
            prop_assert!(alpha >= 0.0);
            let best = f(alpha);
            let tol = 1e-9 * (1.0 + best.abs());
            for probe in [0.0, alpha * 0.5, alpha * 1.5 + 1e-3, alpha + 1.0, alpha + 10.0] {
                prop_assert!(best <= f(probe) + tol, "alpha {alpha} vs {probe}");
            }
            if alpha > 1e-6 {
                prop_assert!(best <= f(alpha - 1e-6) + tol);
            }
        } else {
            // unbounded below along α ≥ 0
            prop_assert!(f(1e6) < f(0.0));
        }
    }

    #[test]
    fn centering_preserves_every_score_gap(w in sized_matrix(1..5, 3..6), rho in 0.01..2.0_f64) {
        let omega = update_omega(w.view(), 1e-8).unwrap();
        let gamma = psd_inv(&omega, 1e-8).unwrap();
        let out = center_weights(&w, &gamma, rho);
        let z = Array1::from_iter((0..w.nrows()).map(|i| 0.3 * i as f64 - 0.7));
        let before = z.dot(&w);
        let after = z.dot(&out);
        for a in 0..w.ncols() {
            for b in 0..w.ncols() {
                let g0 = before[a] - before[b];
                let g1 = after[a] - after[b];
                prop_assert!((g0 - g1).abs() <= 1e-9 * (1.0 + g0.abs()));
            }
        }
    }

    #[test]
    fn transform_is_linear(
        p in matrix(5, 2),
        x in sized_matrix(1..6, 5..6),
        y_shift in -2.0..2.0_f64,
        s in -3.0..3.0_f64,
    ) {
        let proj = ProjectionModel::new(p).unwrap();
        let y = x.mapv(|v| v * 0.5 + y_shift);
        let lhs = transform(&proj, (&x * s + &y).view()).unwrap();
        let rhs = transform(&proj, x.view()).unwrap() * s + transform(&proj, y.view()).unwrap();
        prop_assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() < 1e-10 * (1.0 + a.abs())));
        let zero = transform(&proj, Array2::zeros((1, 5)).view()).unwrap();
        prop_assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn libsvm_and_csv_round_trip(
        x in sized_matrix(2..10, 1..6),
        k in 2usize..4,
    ) {
        let n = x.nrows();
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let names: Vec<String> = (0..k).map(|c| format!("{}", c as i64 * 3 - 2)).collect();
        let ds = LabeledDataset::from_indices(x.clone(), labels, names).unwrap();
        let back = parse_libsvm(&to_libsvm(&ds), Some(ds.d())).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());

        let mut csv = String::new();
        for (i, row) in x.outer_iter().enumerate() {
            csv.push_str(&ds.label_map()[ds.labels()[i]]);
            for v in row {
                csv.push_str(&format!(",{v:?}"));
            }
            csv.push('\n');
        }
        let back = parse_csv(&csv, &LabelColumn::Index(0), false).unwrap();
        prop_assert_eq!(back.features(), ds.features());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_is_monotone_with_consistent_counters(
        x in matrix(24, 6),
        k in 2usize..4,
        seed in 0u64..1000,
        c in 0.05..2.0_f64,
        eta in 0.0..0.1_f64,
    ) {
        let labels: Vec<usize> = (0..24).map(|i| i % k).collect();
        let ds = LabeledDataset::from_indices(x, labels, (0..k).map(|c| c.to_string()).collect())
            .unwrap();
        let hp = Hyperparams { c, eta, dim: 3, ..Hyperparams::default() };
        let cfg = TrainConfig { seed, max_outer_iters: 8, ..TrainConfig::default() };
        let res = fit(&ds, &hp, &cfg, &LbfgsConfig::default()).unwrap();
        let trace = &res.report.objective_trace;
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{trace:?}");
        }
        let rep = &res.report;
        prop_assert!(rep.gradient_evals <= rep.objective_evals, "{rep:?}");
        prop_assert!(rep.gradient_evals >= rep.lbfgs_iters, "{rep:?}");
        prop_assert!(rep.lbfgs_iters >= rep.outer_iters, "{rep:?}");
    }
}
