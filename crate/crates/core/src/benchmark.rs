//! Asymptotic versus bootstrap timing on synthetic datasets.
//!
//! `small` is a linear model with two binary factors, a natural spline in
//! age and a factor-by-spline interaction (n = 245). `large` is a logistic
//! model with one binary factor, a spline in age and their interaction
//! (n = 20000).

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze, AnalysisConfig, AnalysisReport};
use crate::design::DataTable;
use crate::error::{Error, Result};
use crate::models::FamilyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Large,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            other => Err(Error::Parameter(format!("unknown preset `{other}` (small, large)"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Large => "large",
        }
    }

    pub fn n(self) -> usize {
        match self {
            Preset::Small => 245,
            Preset::Large => 20_000,
        }
    }

    pub fn family(self) -> FamilyKind {
        match self {
            Preset::Small => FamilyKind::Linear,
            Preset::Large => FamilyKind::Logistic,
        }
    }

    pub fn terms(self) -> &'static str {
        match self {
            Preset::Small => "bin(dx) + bin(sex) + ns(age,3) + dx:ns(age,3)",
            Preset::Large => "bin(sex) + ns(age,3) + sex:ns(age,3)",
        }
    }

    /// Synthetic dataset with outcome column `y`.
    pub fn dataset(self, seed: u64) -> DataTable {
        let n = self.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut y = Vec::with_capacity(n);
        let mut sex = Vec::with_capacity(n);
        let mut age = Vec::with_capacity(n);
        match self {
            Preset::Small => {
                let mut dx = Vec::with_capacity(n);
                for _ in 0..n {
                    let d = if rng.random::<f64>() < 140.0 / 245.0 { 1.0 } else { 0.0 };
                    let s = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                    let a = 8.0 + 10.0 * rng.random::<f64>();
                    let mean = 50.0 + 5.0 * d + 1.5 * s + 3.0 * ((a - 8.0) / 3.0).sin() + 0.8 * d * (a - 13.0);
                    let e: f64 = normal.sample(&mut rng);
                    y.push(mean + 8.0 * (1.0 + 0.5 * d) * e);
                    dx.push(d);
                    sex.push(s);
                    age.push(a);
                }
                DataTable::new(
                    vec!["y".into(), "dx".into(), "sex".into(), "age".into()],
                    vec![y, dx, sex, age],
                )
                .expect("consistent columns")
            }
            Preset::Large => {
                for _ in 0..n {
                    let s = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                    let a = 1.5 + 16.5 * rng.random::<f64>();
                    let c = (a - 10.0) / 5.0;
                    let eta = -1.0 + 0.5 * s - 0.4 * c + 0.3 * c * c + 0.25 * s * c;
                    let p = 1.0 / (1.0 + (-eta).exp());
                    y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
                    sex.push(s);
                    age.push(a);
                }
                DataTable::new(vec!["y".into(), "sex".into(), "age".into()], vec![y, sex, age])
                    .expect("consistent columns")
            }
        }
    }

    pub fn config(self, alpha: f64, seed: u64) -> AnalysisConfig {
        let mut c = AnalysisConfig::new("y", self.family(), self.terms());
        c.alpha = alpha;
        c.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub preset: Preset,
    pub n: usize,
    pub bootstrap: usize,
    pub asymptotic_seconds: f64,
    pub bootstrap_seconds: f64,
    pub ratio: f64,
    /// Largest gap between matching asymptotic and bootstrap endpoints over
    /// the coefficient table.
    pub max_endpoint_gap: f64,
    pub report: AnalysisReport,
}

/// Largest endpoint gap between the asymptotic and bootstrap intervals of
/// the coefficient table.
pub fn max_endpoint_gap(report: &AnalysisReport) -> Option<f64> {
    report
        .coefficients
        .iter()
        .map(|r| {
            Some(
                (r.ci_lower - r.boot_lower?)
                    .abs()
                    .max((r.ci_upper - r.boot_upper?).abs()),
            )
        })
        .try_fold(0.0f64, |acc, g| Some(acc.max(g?)))
}

/// Runs the analysis without and then with `bootstrap` replicates on the
/// same preset dataset.
pub fn run_benchmark(preset: Preset, bootstrap: usize, alpha: f64, seed: u64) -> Result<BenchmarkReport> {
    let data = preset.dataset(seed);
    let cfg = preset.config(alpha, seed);

    let start = Instant::now();
    analyze(&data, &cfg)?;
    let asymptotic_seconds = start.elapsed().as_secs_f64();

    let mut boot_cfg = cfg;
    boot_cfg.bootstrap = Some(bootstrap);
    let start = Instant::now();
    let report = analyze(&data, &boot_cfg)?;
    let bootstrap_seconds = start.elapsed().as_secs_f64();

    let gap = max_endpoint_gap(&report).expect("bootstrap intervals present");
    Ok(BenchmarkReport {
        preset,
        n: preset.n(),
        bootstrap,
        asymptotic_seconds,
        bootstrap_seconds,
        ratio: bootstrap_seconds / asymptotic_seconds.max(f64::MIN_POSITIVE),
        max_endpoint_gap: gap,
        report,
    })
}
