//! Cohen's d and Cohen's f with noncentral-distribution intervals.
//!
//! Both indices assume normal homoskedastic errors. Intervals invert the
//! noncentral t (d) or noncentral F (f) CDF in the noncentrality parameter;
//! a noncentrality bound below zero is clamped at zero for f.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{ContrastMatrix, DesignMatrix};
use crate::error::{Error, Result};
use crate::intervals::{check_alpha, CiBranch, CiMethod, ConfidenceInterval};
use crate::linalg::spd_inverse;
use crate::models::{fit, CovMode, HcFlavor, ModelFamily};
use crate::roots::brent;
use crate::special::{noncentral_f_cdf, noncentral_t_cdf};

const NC_TOL: f64 = 1e-10;
const NC_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohenKind {
    D,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohenEstimate {
    pub value: f64,
    pub kind: CohenKind,
    pub ci: ConfidenceInterval,
    pub df1: f64,
    pub df2: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (mean, ss)
}

/// Finds `x` with `cdf(x) = target` for a CDF decreasing in `x`, starting the
/// search from `[lo, hi]` and widening the upper end as needed.
fn invert_decreasing<F: Fn(f64) -> f64>(cdf: F, target: f64, lo: f64, mut hi: f64) -> Result<f64> {
    let g = |x: f64| cdf(x) - target;
    let mut widen = 0;
    while g(hi) > 0.0 {
        hi = lo + 2.0 * (hi - lo);
        widen += 1;
        if widen > 60 {
            return Err(Error::Solver("noncentrality bracket not found".into()));
        }
    }
    Ok(brent(g, lo, hi, NC_TOL, NC_MAX_ITER)?.x)
}

/// Cohen's d for `y1` minus `y0`, pooled SD with `n₀ + n₁ - 2` degrees of
/// freedom.
pub fn cohens_d(y0: &[f64], y1: &[f64], alpha: f64) -> Result<CohenEstimate> {
    check_alpha(alpha)?;
    if y0.len() < 2 || y1.len() < 2 {
        return Err(Error::DegenerateGroups("each group needs at least 2 observations".into()));
    }
    let (n0, n1) = (y0.len() as f64, y1.len() as f64);
    let (m0, ss0) = mean_var(y0);
    let (m1, ss1) = mean_var(y1);
    let df = n0 + n1 - 2.0;
    let sp = ((ss0 + ss1) / df).sqrt();
    if sp <= 0.0 || !sp.is_finite() {
        return Err(Error::DegenerateGroups("zero pooled variance".into()));
    }
    let d = (m1 - m0) / sp;
    let scale = (n0 * n1 / (n0 + n1)).sqrt();
    let t = d * scale;
    let cdf = |delta: f64| noncentral_t_cdf(t, df, delta);
    let span = 10.0 + 2.0 * t.abs();
    // the CDF decreases in δ: δ_L leaves 1 - α/2 below t, δ_U leaves α/2
    let lower = invert_decreasing(cdf, 1.0 - alpha / 2.0, t - span, t + span)?;
    let upper = invert_decreasing(cdf, alpha / 2.0, t - span, t + span)?;
    Ok(CohenEstimate {
        value: d,
        kind: CohenKind::D,
        ci: ConfidenceInterval {
            lower: lower / scale,
            upper: upper / scale,
            level: 1.0 - alpha,
            method: CiMethod::NoncentralInversion,
            branch: CiBranch::NotApplicable,
        },
        df1: 1.0,
        df2: df,
    })
}

/// Classical F statistic for `H₀: Lβ = 0` under homoskedastic OLS.
pub fn classical_f(design: &DesignMatrix, y: &[f64], l: &ContrastMatrix) -> Result<(f64, f64, f64)> {
    let model = fit(ModelFamily::linear(), design, y, CovMode::Robust(HcFlavor::Hc0))?;
    let (n, m) = (model.n() as f64, model.p() as f64);
    let sigma2 = model.dispersion().expect("linear fits carry a dispersion");
    let gram = model.x().transpose() * model.x();
    let gram_inv = spd_inverse(&gram, "XᵀX")?;
    let beta: DVector<f64> = l.apply(&model.coefficients());
    let v = l.sandwich(&gram_inv) * sigma2;
    let v_inv = spd_inverse(&v, "L(XᵀX)⁻¹Lᵀ")?;
    let m1 = l.m1() as f64;
    let f = beta.dot(&(&v_inv * &beta)) / m1;
    Ok((f, m1, n - m))
}

/// Cohen's f from the classical F test of the tested coefficients.
pub fn cohens_f(design: &DesignMatrix, y: &[f64], l: &ContrastMatrix, alpha: f64) -> Result<CohenEstimate> {
    check_alpha(alpha)?;
    let (f, df1, df2) = classical_f(design, y, l)?;
    let n = design.n() as f64;
    let value = (f * df1 / df2).max(0.0).sqrt();
    let cdf = |lambda: f64| noncentral_f_cdf(f, df1, df2, lambda);
    let guess = (f * df1).max(1.0);
    let hi = guess + 20.0 * guess.sqrt() + 20.0;
    let bound = |target: f64| -> Result<f64> {
        if cdf(0.0) <= target {
            Ok(0.0)
        } else {
            invert_decreasing(cdf, target, 0.0, hi)
        }
    };
    let lambda_lo = bound(1.0 - alpha / 2.0)?;
    let lambda_hi = bound(alpha / 2.0)?;
    Ok(CohenEstimate {
        value,
        kind: CohenKind::F,
        ci: ConfidenceInterval {
            lower: (lambda_lo / n).sqrt(),
            upper: (lambda_hi / n).sqrt(),
            level: 1.0 - alpha,
            method: CiMethod::NoncentralInversion,
            branch: CiBranch::NotApplicable,
        },
        df1,
        df2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, DataTable, TermSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Bernoulli, Distribution, Normal};

    #[test]
    fn unit_shift_gives_d_one() {
        // each group alternates ±1 around its mean, pooled SD ≈ 1
        let g0: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let g1: Vec<f64> = g0.iter().map(|v| v + 1.0).collect();
        let d = cohens_d(&g0, &g1, 0.05).unwrap();
        assert!((d.value - 1.0).abs() < 0.01, "{}", d.value);
        assert!(d.ci.lower < d.value && d.value < d.ci.upper);
    }

    #[test]
    fn identical_groups_symmetric() {
        let g: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = cohens_d(&g, &g, 0.05).unwrap();
        assert_eq!(d.value, 0.0);
        assert!((d.ci.lower + d.ci.upper).abs() < 1e-8);
        assert!(cohens_d(&[1.0, 1.0], &[2.0, 2.0], 0.05).is_err());
        assert!(cohens_d(&[1.0], &[2.0, 3.0], 0.05).is_err());
    }

    #[test]
    fn d_antisymmetric_under_swap() {
        let a = [0.1, 0.5, 0.9, 1.4, 0.3];
        let b = [1.1, 1.9, 1.2, 2.4, 0.8, 1.7];
        let ab = cohens_d(&a, &b, 0.05).unwrap();
        let ba = cohens_d(&b, &a, 0.05).unwrap();
        assert!((ab.value + ba.value).abs() < 1e-14);
        assert!((ab.ci.lower + ba.ci.upper).abs() < 1e-7);
    }

    #[test]
    fn d_interval_reference() {
        // scipy nct inversion for t = 2.5, df = 38, n0 = n1 = 20
        let scale = (20.0f64 * 20.0 / 40.0).sqrt();
        let d = 2.5 / scale;
        let g0: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let sd = (20.0f64 / 19.0).sqrt();
        let g1: Vec<f64> = g0.iter().map(|v| v + d * sd).collect();
        let est = cohens_d(&g0, &g1, 0.05).unwrap();
        assert!((est.value - d).abs() < 1e-12);
        assert!((est.ci.lower * scale - 0.446355074173099).abs() < 1e-6, "{}", est.ci.lower * scale);
        assert!((est.ci.upper * scale - 4.523246196480565).abs() < 1e-6, "{}", est.ci.upper * scale);
    }

    fn binary_design(n: usize, p: f64, beta: f64, seed: u64) -> (DesignMatrix, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bern = Bernoulli::new(p).unwrap();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..n).map(|_| if bern.sample(&mut rng) { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = x.iter().map(|xi| beta * xi + noise.sample(&mut rng)).collect();
        let t = DataTable::new(vec!["x".into()], vec![x.clone()]).unwrap();
        (build_design(&t, &[TermSpec::binary("x")]).unwrap(), y, x)
    }

    #[test]
    fn f_relates_to_d() {
        let (design, y, x) = binary_design(10_000, 0.4, 0.6, 3);
        let l = ContrastMatrix::new(vec![1], 2).unwrap();
        let f = cohens_f(&design, &y, &l, 0.05).unwrap();
        let (y0, y1): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (xi, yi) in x.iter().zip(&y) {
                if *xi == 0.0 { a.push(*yi) } else { b.push(*yi) }
            }
            (a, b)
        };
        let d = cohens_d(&y0, &y1, 0.05).unwrap();
        let p = y1.len() as f64 / y.len() as f64;
        let implied = d.value.abs() * (p * (1.0 - p)).sqrt();
        assert!((f.value / implied - 1.0).abs() < 0.02, "{} vs {implied}", f.value);
        assert!(f.ci.lower < f.value && f.value < f.ci.upper);
    }

    #[test]
    fn f_null_and_swap_invariance() {
        // y orthogonal to the centered predictor
        let x: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..40).map(|i| ((i / 2) % 5) as f64).collect();
        let t = DataTable::new(vec!["x".into()], vec![x.clone()]).unwrap();
        let design = build_design(&t, &[TermSpec::binary("x")]).unwrap();
        let l = ContrastMatrix::new(vec![1], 2).unwrap();
        let f = cohens_f(&design, &y, &l, 0.05).unwrap();
        assert!(f.value < 1e-12);
        assert_eq!(f.ci.lower, 0.0);

        let (d1, y1, x1) = binary_design(200, 0.5, 0.4, 8);
        let flipped: Vec<f64> = x1.iter().map(|v| 1.0 - v).collect();
        let t = DataTable::new(vec!["x".into()], vec![flipped]).unwrap();
        let d2 = build_design(&t, &[TermSpec::binary("x")]).unwrap();
        let a = cohens_f(&d1, &y1, &l, 0.05).unwrap();
        let b = cohens_f(&d2, &y1, &l, 0.05).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
    }
}
