use nalgebra::DMatrix;
use proptest::prelude::*;

use nircal::ensemble::{
    ambiguity, bootstrap_plan, confidence_interval, cv_plan, decomposition_check, ensemble_mean,
};
use nircal::evalx::{rmse, training_sets, Schedule};
use nircal::features::{fit_pca, FeatureSpec, ProjectionKind};
use nircal::linmodel::{fit_pls1, pls1_scores};
use nircal::preprocess::{baseline_correct, build_sg, msc};
use nircal::spectra::{grow_train, select_range, split_indices, SampleSet, Spectrum};

fn preds() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..60)
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| 7600.0 + 8.0 * i as f64).collect()
}

fn sample_set(x: &DMatrix<f64>) -> SampleSet {
    let n = x.nrows();
    SampleSet::new(
        grid(x.ncols()),
        x.clone(),
        DMatrix::from_fn(n, 1, |i, _| i as f64),
        (0..n).map(|i| 20.0 + i as f64).collect(),
        vec!["c1".into()],
    )
    .unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_identity_and_dominance(p in preds(), y in -150.0f64..150.0) {
        let d = decomposition_check(&p, y).unwrap();
        let scale = d.mean_individual_sq_err.max(1e-300);
        prop_assert!(d.residual.abs() / scale < 1e-10);
        prop_assert!(d.ensemble_sq_err <= d.mean_individual_sq_err * (1.0 + 1e-12));
    }

    #[test]
    fn ambiguity_is_translation_invariant(p in preds(), c in -50.0f64..50.0) {
        let a = ambiguity(&p, ensemble_mean(&p).unwrap()).unwrap();
        let q: Vec<f64> = p.iter().map(|v| v + c).collect();
        let b = ambiguity(&q, ensemble_mean(&q).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn ensemble_is_permutation_invariant(p in preds(), seed in any::<u64>()) {
        let mut q = p.clone();
        let k = (seed as usize) % q.len();
        q.rotate_left(k);
        q.reverse();
        let (m1, m2) = (ensemble_mean(&p).unwrap(), ensemble_mean(&q).unwrap());
        prop_assert!((m1 - m2).abs() <= 1e-12 * (1.0 + m1.abs()));
        let (a1, a2) = (ambiguity(&p, m1).unwrap(), ambiguity(&q, m2).unwrap());
        prop_assert!((a1 - a2).abs() <= 1e-10 * (1.0 + a1));
    }

    #[test]
    fn interval_width_scales_with_alpha(m in -10.0f64..10.0, s in 0.0f64..5.0, alpha in 0.1f64..5.0) {
        let a = confidence_interval(m, s, alpha).unwrap();
        let b = confidence_interval(m, s, 2.0 * alpha).unwrap();
        prop_assert!((b.width() - 2.0 * a.width()).abs() <= 1e-12 * (1.0 + b.width()));
        prop_assert!(a.contains(m));
    }

    #[test]
    fn rmse_symmetric_and_permutation_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50),
    ) {
        let (a, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let r = rmse(&a, &p).unwrap();
        prop_assert!((r - rmse(&p, &a).unwrap()).abs() < 1e-12);
        let (ra, rp): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
        prop_assert!((r - rmse(&ra, &rp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rmse_shift_formula(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50),
        c in -5.0f64..5.0,
    ) {
        let (a, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let r = rmse(&a, &p).unwrap();
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let mean_diff = p.iter().zip(&a).map(|(p, a)| p - a).sum::<f64>() / p.len() as f64;
        let expected = (r * r + 2.0 * c * mean_diff + c * c).max(0.0).sqrt();
        let direct = (a.iter().zip(&shifted).map(|(a, s)| (s - a).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        let got = rmse(&a, &shifted).unwrap();
        prop_assert!((got - expected).abs() < 1e-9);
        prop_assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn split_and_growth_partition_indices(n in 10usize..200, frac in 0.05f64..0.6, k in 1usize..10, seed in any::<u64>()) {
        let n_train = ((n as f64 * frac) as usize).max(1);
        let (tr, te) = split_indices(n, n_train, seed).unwrap();
        prop_assert_eq!(tr.len(), n_train);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let k = k.min(te.len());
        let (tr2, te2) = grow_train(&tr, &te, k, seed).unwrap();
        prop_assert!(tr.iter().all(|i| tr2.contains(i)));
        prop_assert_eq!(tr2.len(), tr.len() + k);
        let mut all: Vec<usize> = tr2.iter().chain(&te2).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_sets_are_nested(seed in any::<u64>()) {
        let sets = training_sets(100, &Schedule { start: 10, step: 15, stop: 85 }, seed).unwrap();
        for w in sets.windows(2) {
            prop_assert!(w[0].0.iter().all(|i| w[1].0.contains(i)));
        }
    }

    #[test]
    fn randomized_operations_are_pure(seed in any::<u64>()) {
        prop_assert_eq!(split_indices(50, 20, seed).unwrap(), split_indices(50, 20, seed).unwrap());
        prop_assert_eq!(bootstrap_plan(30, 3, seed).unwrap(), bootstrap_plan(30, 3, seed).unwrap());
    }

    #[test]
    fn bootstrap_members_have_full_length(n in 2usize..80, m in 1usize..6, seed in any::<u64>()) {
        let plan = bootstrap_plan(n, m, seed).unwrap();
        prop_assert_eq!(plan.members.len(), m);
        prop_assert!(plan.members.iter().all(|r| r.len() == n && r.iter().all(|i| *i < n)));
    }

    #[test]
    fn cv_partitions_hold_out_each_index_once(n in 20usize..120, seed in any::<u64>()) {
        let plan = cv_plan(n, 0.2, 10, seed).unwrap();
        let folds = plan.folds();
        for q in 0..plan.holdouts.len() / folds {
            let mut count = vec![0; n];
            for h in &plan.holdouts[q * folds..(q + 1) * folds] {
                for &i in h {
                    count[i] += 1;
                }
            }
            prop_assert!(count.iter().all(|c| *c == 1));
        }
        for (m, h) in plan.members.iter().zip(&plan.holdouts) {
            prop_assert_eq!(m.len() + h.len(), n);
        }
    }

    #[test]
    fn select_range_is_idempotent(x in matrix(3, 40), lo in 7600.0f64..7800.0, width in 20.0f64..300.0) {
        let set = sample_set(&x);
        let once = select_range(&set, lo, lo + width).unwrap();
        let twice = select_range(&once, lo, lo + width).unwrap();
        prop_assert_eq!(once.wavenumbers(), twice.wavenumbers());
        prop_assert_eq!(once.absorbance(), twice.absorbance());
    }

    #[test]
    fn baseline_correction_is_linear(
        s1 in prop::collection::vec(-1.0f64..1.0, 30),
        s2 in prop::collection::vec(-1.0f64..1.0, 30),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        order in 0usize..3,
    ) {
        let g = grid(30);
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
        let c = |v: &[f64]| baseline_correct(&Spectrum::new(g.clone(), v.to_vec()).unwrap(), order).unwrap();
        let (c1, c2, cm) = (c(&s1), c(&s2), c(&mix));
        for j in 0..30 {
            let lin = a * c1.absorbance()[j] + b * c2.absorbance()[j];
            prop_assert!((cm.absorbance()[j] - lin).abs() < 1e-9);
        }
    }

    #[test]
    fn sg_reproduces_low_degree_polynomials(half in 1usize..6, poly in 0usize..4, coef in prop::collection::vec(-1.0f64..1.0, 4)) {
        let window = 2 * half + 1;
        prop_assume!(poly < window);
        let f = build_sg(window, poly, 0).unwrap();
        let g: Vec<f64> = (0..40).map(|i| 0.5 + 0.03 * i as f64).collect();
        let y: Vec<f64> = g.iter().map(|x| (0..=poly).map(|d| coef[d] * x.powi(d as i32)).sum()).collect();
        let out = f.apply(&Spectrum::new(g, y.clone()).unwrap()).unwrap();
        for (a, b) in out.absorbance().iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn msc_is_idempotent(base in prop::collection::vec(0.5f64..1.5, 25), gains in prop::collection::vec((0.5f64..2.0, -0.3f64..0.3), 4)) {
        let x = DMatrix::from_fn(4, 25, |i, j| gains[i].0 * base[j] + gains[i].1 + 0.01 * ((i * j) as f64).sin());
        let reference: Vec<f64> = x.row_mean().iter().copied().collect();
        let once = msc(&x, Some(&reference)).unwrap();
        let twice = msc(&once, Some(&reference)).unwrap();
        prop_assert!((&once - &twice).amax() < 1e-10);
    }

    #[test]
    fn pca_explained_fractions_are_ordered(x in matrix(12, 20)) {
        let p = fit_pca(&x, 5).unwrap();
        prop_assert!(p.explained.iter().all(|f| (0.0..=1.0).contains(f)));
        prop_assert!(p.explained.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn projection_is_affine(x in matrix(10, 15), a in 0.0f64..1.0) {
        let temps: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let spec = FeatureSpec::fit(ProjectionKind::Pca, &x, &temps, 3, false).unwrap();
        let x1 = x.rows(0, 5).into_owned();
        let x2 = x.rows(5, 5).into_owned();
        let t = &temps[..5];
        let mixed = &x1 * a + &x2 * (1.0 - a);
        let lhs = spec.project(&mixed, t).unwrap();
        let rhs = spec.project(&x1, t).unwrap() * a + spec.project(&x2, t).unwrap() * (1.0 - a);
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn pca_ignores_row_order(x in matrix(12, 10), seed in any::<u64>()) {
        let k = (seed as usize) % 12;
        let order: Vec<usize> = (0..12).map(|i| (i + k) % 12).collect();
        let y = x.select_rows(&order);
        let (a, b) = (fit_pca(&x, 3).unwrap(), fit_pca(&y, 3).unwrap());
        for c in 0..3 {
            let (ca, cb) = (a.loadings.column(c), b.loadings.column(c));
            let s = if ca.dot(&cb) < 0.0 { -1.0 } else { 1.0 };
            prop_assert!((ca - cb * s).amax() < 1e-8);
        }
    }

    #[test]
    fn pls1_residuals_shrink_and_scores_are_orthogonal(x in matrix(15, 12), w in prop::collection::vec(-1.0f64..1.0, 12)) {
        let y: Vec<f64> = (0..15).map(|i| x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
        let mut prev = f64::INFINITY;
        for a in 1..=6 {
            let m = fit_pls1(&x, &y, a).unwrap();
            let p = m.predict(&x).unwrap();
            let sse: f64 = p.iter().zip(&y).map(|(p, y)| (p - y).powi(2)).sum();
            prop_assert!(sse <= prev * (1.0 + 1e-9) + 1e-12);
            prev = sse;
        }
        let t = pls1_scores(&x, &y, 5).unwrap();
        let g = t.transpose() * &t;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    prop_assert!(g[(i, j)].abs() <= 1e-6 * (g[(i, i)] * g[(j, j)]).sqrt().max(1e-12));
                }
            }
        }
    }
}
