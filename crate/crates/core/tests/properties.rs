use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use resi::analysis::{analyze, AnalysisConfig};
use resi::design::{ContrastMatrix, DataTable};
use resi::estimator::{resi_scaled, resi_signed, resi_unsigned, wald_statistics, ResiVariant};
use resi::models::{covariance, fit_matrix, CovMode, FamilyKind, FittedModel, HcFlavor, ModelFamily};
use resi::simlab::{solve_beta, ErrorKind, Generator};
use resi::variance::estimate_resi;

fn linear_data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::<f64>::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        0.5 + 0.4 * x[(i, 1)] - 0.3 * x[(i, 2)] + 0.1 * x[(i, 3)] + e * (0.7 + 0.4 * x[(i, 1)].abs())
    });
    (x, y)
}

fn logistic_data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::<f64>::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let y = DVector::from_fn(n, |i, _| {
        let eta = -0.3 + 0.6 * x[(i, 1)] - 0.4 * x[(i, 2)] + 0.2 * x[(i, 3)];
        if rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()) { 1.0 } else { 0.0 }
    });
    (x, y)
}

fn modes(kind: FamilyKind) -> Vec<CovMode> {
    match kind {
        FamilyKind::Linear => vec![CovMode::Robust(HcFlavor::Hc0), CovMode::Robust(HcFlavor::Hc3), CovMode::ModelBased],
        FamilyKind::Logistic => vec![CovMode::Robust(HcFlavor::Hc0), CovMode::ModelBased],
    }
}

fn summary(model: &FittedModel, l: &ContrastMatrix, variant: ResiVariant) -> (f64, f64, f64) {
    let (stats, est) = estimate_resi(model, l, variant).unwrap();
    (stats.t_squared, est.value, est.sigma_s.unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn covariate_rescaling_leaves_resi_unchanged(
        seed in 0u64..1000,
        scales in prop::array::uniform3(0.01f64..100.0),
        logistic in any::<bool>(),
    ) {
        let kind = if logistic { FamilyKind::Logistic } else { FamilyKind::Linear };
        let (x, y) = if logistic { logistic_data(300, seed) } else { linear_data(300, seed) };
        let mut xs = x.clone();
        for (j, s) in scales.iter().enumerate() {
            xs.column_mut(j + 1).scale_mut(*s);
        }
        for mode in modes(kind) {
            let a = fit_matrix(ModelFamily::of(kind), x.clone(), y.clone(), mode).unwrap();
            let b = fit_matrix(ModelFamily::of(kind), xs.clone(), y.clone(), mode).unwrap();
            for (cols, variant) in [
                (vec![1], ResiVariant::signed_for(kind)),
                (vec![1], ResiVariant::unsigned_for(kind)),
                (vec![1, 2, 3], ResiVariant::unsigned_for(kind)),
                (vec![2, 3], ResiVariant::Scaled),
            ] {
                let l = ContrastMatrix::new(cols, 4).unwrap();
                let (ta, va, sa) = summary(&a, &l, variant);
                let (tb, vb, sb) = summary(&b, &l, variant);
                prop_assert!(close(ta, tb, 1e-8), "{mode} T2 {ta} vs {tb}");
                prop_assert!(close(va, vb, 1e-8), "{mode} S {va} vs {vb}");
                prop_assert!(close(sa, sb, 1e-8), "{mode} sigma {sa} vs {sb}");
            }
        }
    }

    #[test]
    fn outcome_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
        let (x, y) = linear_data(200, seed);
        for mode in modes(FamilyKind::Linear) {
            let a = fit_matrix(ModelFamily::linear(), x.clone(), y.clone(), mode).unwrap();
            let b = fit_matrix(ModelFamily::linear(), x.clone(), &y * c, mode).unwrap();
            let (ca, cb) = (a.coefficients(), b.coefficients());
            for j in 0..4 {
                prop_assert!(close(ca[j] * c, cb[j], 1e-9));
            }
            let l = ContrastMatrix::new(vec![1, 2], 4).unwrap();
            let (_, va, sa) = summary(&a, &l, ResiVariant::UnsignedF);
            let (_, vb, sb) = summary(&b, &l, ResiVariant::UnsignedF);
            prop_assert!(close(va, vb, 1e-8) && close(sa, sb, 1e-8));
        }
        let (xl, yl) = logistic_data(200, seed);
        prop_assert!(fit_matrix(ModelFamily::logistic(), xl, &yl * 2.0, CovMode::Robust(HcFlavor::Hc0)).is_err());
    }

    #[test]
    fn estimating_equation_is_solved(seed in 0u64..1000, logistic in any::<bool>()) {
        let kind = if logistic { FamilyKind::Logistic } else { FamilyKind::Linear };
        let (x, y) = if logistic { logistic_data(250, seed) } else { linear_data(250, seed) };
        for mode in modes(kind) {
            let m = fit_matrix(ModelFamily::of(kind), x.clone(), y.clone(), mode).unwrap();
            let score = m.estimating_equation(m.theta());
            prop_assert!(score.amax() <= 1e-8, "{mode}: {}", score.amax());
        }
    }

    #[test]
    fn estimator_identities(seed in 0u64..1000, m1 in 1usize..4, logistic in any::<bool>()) {
        let kind = if logistic { FamilyKind::Logistic } else { FamilyKind::Linear };
        let (x, y) = if logistic { logistic_data(120, seed) } else { linear_data(120, seed) };
        let m = fit_matrix(ModelFamily::of(kind), x, y, CovMode::default_for(kind)).unwrap();
        let l = ContrastMatrix::new((1..=m1).collect(), 4).unwrap();
        let cov = covariance(&m).unwrap();
        let stats = wald_statistics(&m, &cov, &l, &DVector::zeros(m1)).unwrap();
        let tilde = resi_scaled(&stats).value;
        let hat = resi_unsigned(&stats).value;
        if stats.t_squared > m1 as f64 {
            prop_assert!((hat * hat - tilde * tilde + m1 as f64 / 120.0).abs() <= 1e-14);
        } else {
            prop_assert_eq!(hat, 0.0);
        }
        if m1 == 1 {
            prop_assert!((tilde - resi_signed(&stats).unwrap().value.abs()).abs() <= 1e-15);
        }
    }

    #[test]
    fn solve_beta_is_monotone(a in 0.0f64..0.41, b in 0.0f64..0.41, eta in prop::sample::select(vec![0.0, -1.0, -2.0])) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        for g in [Generator::Linear(ErrorKind::Hetero), Generator::Logistic { eta }] {
            let bl = solve_beta(g, lo).unwrap();
            let bh = solve_beta(g, hi).unwrap();
            prop_assert!(bh > bl && bl >= 0.0);
        }
    }
}

fn term_table(n: usize, seed: u64) -> DataTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::<f64>::new(); 4];
    for _ in 0..n {
        let g = if rng.random::<f64>() < 0.45 { 1.0 } else { 0.0 };
        let age = 5.0 + 15.0 * rng.random::<f64>();
        let z: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        cols[0].push(0.6 * g + (age / 4.0).sin() + 0.2 * z + 0.3 * g * age / 10.0 + e);
        cols[1].push(g);
        cols[2].push(age);
        cols[3].push(z);
    }
    DataTable::new(vec!["y".into(), "g".into(), "age".into(), "z".into()], cols).unwrap()
}

#[test]
fn term_order_does_not_change_resi() {
    let data = term_table(400, 21);
    let orders = [
        "bin(g) + ns(age,3) + z + g:ns(age,3)",
        "z + ns(age,3) + bin(g) + g:ns(age,3)",
        "ns(age,3) + bin(g) + z + g:ns(age,3)",
    ];
    let reports: Vec<_> = orders
        .iter()
        .map(|t| analyze(&data, &AnalysisConfig::new("y", FamilyKind::Linear, t)).unwrap())
        .collect();
    for rep in &reports[1..] {
        for row in &reports[0].anova {
            let other = rep.anova.iter().find(|r| r.term == row.term).unwrap();
            assert!((row.resi - other.resi).abs() <= 1e-10, "{}", row.term);
            assert!((row.se - other.se).abs() <= 1e-10, "{}", row.term);
        }
        for row in &reports[0].coefficients {
            let other = rep.coefficients.iter().find(|r| r.term == row.term).unwrap();
            assert!((row.resi - other.resi).abs() <= 1e-10, "{}", row.term);
        }
    }
}

#[test]
fn sigma_tends_to_one_near_the_null() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::<f64>::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let l = ContrastMatrix::new(vec![1], 2).unwrap();
    let mut seen = 0;
    for beta in [0.2, 0.1, 0.05, 0.03, 0.02, 0.01] {
        for mode in modes(FamilyKind::Linear) {
            // the model-based form only reduces to 1 when the error variance is constant
            let spread = if mode == CovMode::ModelBased { 0.0 } else { 0.5 };
            let y = DVector::from_fn(n, |i, _| beta * x[(i, 1)] + noise[i] * (1.0 + spread * x[(i, 1)].abs()));
            let m = fit_matrix(ModelFamily::linear(), x.clone(), y.clone(), mode).unwrap();
            let (_, est) = estimate_resi(&m, &l, ResiVariant::Scaled).unwrap();
            if est.value < 0.05 {
                seen += 1;
                let s = est.sigma_s.unwrap();
                assert!((s - 1.0).abs() <= 0.05, "{mode} S {} sigma {s}", est.value);
            }
        }
    }
    assert!(seen >= 6);
}

#[test]
fn logistic_model_based_matches_hc0_when_correct() {
    let (x, y) = logistic_data(20_000, 8);
    let robust = fit_matrix(ModelFamily::logistic(), x.clone(), y.clone(), CovMode::Robust(HcFlavor::Hc0)).unwrap();
    let model = fit_matrix(ModelFamily::logistic(), x, y, CovMode::ModelBased).unwrap();
    let a = covariance(&robust).unwrap().sigma_theta;
    let b = covariance(&model).unwrap().sigma_theta;
    for i in 0..4 {
        for j in 0..4 {
            let scale = (a[(i, i)] * a[(j, j)]).sqrt();
            assert!((a[(i, j)] - b[(i, j)]).abs() <= 0.10 * scale, "({i},{j})");
        }
    }
}
