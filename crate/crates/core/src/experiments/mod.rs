//! Monte Carlo harnesses. Every trial draws from its own stream
//! `trial_rng(seed, trial)` and results are gathered in trial order, so a
//! report does not depend on the number of worker threads.

mod clt;
mod concentration;
mod esd;
mod limit;
mod sweeps;

use rayon::prelude::*;
use serde::Serialize;

pub use clt::{clt_covariance, run_clt_experiment, CltConfig, CltModel, CltReport, CoordinateStats};
pub use concentration::{
    run_concentration_experiment, run_concentration_experiment_with, run_test_function_experiment,
    ConcentrationOptions, ConcentrationReport, ConcentrationTrial, ProbabilityBounds, TestFunctionReport,
    TestFunctionTrial,
};
pub use esd::{run_esd_experiment, EsdOptions, EsdReport};
pub use limit::{
    limit_level, run_deterministic_limit_experiment, LimitConfig, LimitFamily, LimitLevelRow, LimitReport,
};
pub use sweeps::{
    potential_bound_sweep, potential_stability_sweep, random_ssb_pair, sandwich_sweep, scalability_agreement_sweep,
    stability_sweep, AgreementRow, PotentialBoundRow, PotentialSweepRow, SandwichRow, StabilitySweepRow, SweepReport,
};

/// Order statistics of one per-trial scalar. Quantiles use linear
/// interpolation between order statistics; NaN entries are dropped.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Quantiles {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        let count = v.len();
        let mean = if count == 0 {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / count as f64
        };
        Self {
            count,
            mean,
            min: quantile_sorted(&v, 0.0),
            q05: quantile_sorted(&v, 0.05),
            median: quantile_sorted(&v, 0.5),
            q95: quantile_sorted(&v, 0.95),
            max: quantile_sorted(&v, 1.0),
        }
    }
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let h = p.clamp(0.0, 1.0) * (len - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Fraction of `true` among `flags`; NaN for an empty slice.
pub fn frequency<I: IntoIterator<Item = bool>>(flags: I) -> f64 {
    let (hit, all) = flags
        .into_iter()
        .fold((0usize, 0usize), |(h, a), f| (h + f as usize, a + 1));
    if all == 0 {
        f64::NAN
    } else {
        hit as f64 / all as f64
    }
}

/// Runs `f(0), …, f(count − 1)` on the rayon pool, returning results by index.
pub(crate) fn run_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..count as u64).into_par_iter().map(f).collect()
}
