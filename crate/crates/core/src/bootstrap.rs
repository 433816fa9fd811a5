//! Nonparametric case-resampling bootstrap with percentile intervals.
//!
//! Replicate `b` draws its rows from a ChaCha stream keyed by the seed with
//! stream number `b`, so results do not depend on how rayon schedules the
//! replicates. Failed refits are redrawn from the same stream.

use log::{debug, warn};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::design::{quantile_sorted, ContrastMatrix, DesignMatrix};
use crate::error::{Error, Result};
use crate::estimator::{resi_point, wald_statistics, ResiVariant};
use crate::intervals::{check_alpha, CiBranch, CiMethod, ConfidenceInterval};
use crate::models::{covariance, fit, CovMode, ModelFamily};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const MIN_REPLICATES: usize = 100;
/// Largest tolerated share of failed refits.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Statistics of every replicate, in replicate order.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapSample {
    pub replicates: Vec<Vec<f64>>,
    pub failures: usize,
}

impl BootstrapSample {
    /// Type-7 percentile interval of component `k`.
    pub fn percentile_ci(&self, k: usize, alpha: f64) -> Result<ConfidenceInterval> {
        check_alpha(alpha)?;
        let mut values: Vec<f64> = self.replicates.iter().map(|r| r[k]).collect();
        values.sort_by(f64::total_cmp);
        Ok(ConfidenceInterval {
            lower: quantile_sorted(&values, alpha / 2.0),
            upper: quantile_sorted(&values, 1.0 - alpha / 2.0),
            level: 1.0 - alpha,
            method: CiMethod::BootstrapPercentile,
            branch: CiBranch::NotApplicable,
        })
    }
}

fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Resamples `n` rows `replicates` times and evaluates `statistic` on each
/// set of row indices.
pub fn resample<F>(n: usize, replicates: usize, seed: u64, statistic: F) -> Result<BootstrapSample>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::Parameter("cannot resample an empty sample".into()));
    }
    let budget = (MAX_FAILURE_RATE * replicates as f64).floor() as usize;
    let results: Vec<(Option<Vec<f64>>, usize)> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(seed, b);
            let mut failures = 0;
            let mut rows = vec![0usize; n];
            while failures <= budget {
                for r in rows.iter_mut() {
                    *r = rng.random_range(0..n);
                }
                match statistic(&rows) {
                    Ok(v) => return (Some(v), failures),
                    Err(e) => {
                        debug!("bootstrap replicate {b} redrawn: {e}");
                        failures += 1;
                    }
                }
            }
            (None, failures)
        })
        .collect();
    let failures: usize = results.iter().map(|r| r.1).sum();
    if failures > budget || results.iter().any(|r| r.0.is_none()) {
        return Err(Error::BootstrapInstability { failures, replicates });
    }
    if failures > 0 {
        warn!("{failures} bootstrap refits failed and were redrawn");
    }
    Ok(BootstrapSample {
        replicates: results.into_iter().map(|r| r.0.expect("checked above")).collect(),
        failures,
    })
}

/// RESI point estimate of `variant` refitted on the given rows.
pub fn refit_resi(
    family: ModelFamily,
    design: &DesignMatrix,
    y: &[f64],
    l: &ContrastMatrix,
    variant: ResiVariant,
    cov_mode: CovMode,
    rows: &[usize],
) -> Result<f64> {
    let d = design.select_rows(rows);
    let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let model = fit(family, &d, &yb, cov_mode)?;
    let cov = covariance(&model)?;
    let stats = wald_statistics(&model, &cov, l, &DVector::zeros(l.m1()))?;
    Ok(resi_point(&stats, variant)?.value)
}

/// Percentile bootstrap interval for one RESI variant.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_ci(
    family: ModelFamily,
    design: &DesignMatrix,
    y: &[f64],
    l: &ContrastMatrix,
    variant: ResiVariant,
    cov_mode: CovMode,
    alpha: f64,
    replicates: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    check_alpha(alpha)?;
    if replicates < MIN_REPLICATES {
        return Err(Error::Parameter(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let sample = resample(design.n(), replicates, seed, |rows| {
        refit_resi(family, design, y, l, variant, cov_mode, rows).map(|v| vec![v])
    })?;
    sample.percentile_ci(0, alpha)
}
