//! Dyadic discretizations of fixed limit densities and the Hellinger bound on
//! their bridges.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{hellinger, kernel_density_2d, GridDensity1D, GridDensity2D};
use crate::scaling::{sinkhorn_scale, MarginPair, ScalingProblem, SinkhornOptions};
use crate::stability::{deterministic_limit_rhs, LimitDensities};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitFamily {
    /// `ρ_r = ρ_c = φ = 1`.
    Constant,
    /// `ρ_r = 1/2 + x`, `ρ_c = 3/2 − y`, `φ = 1 + ½ cos(πx) cos(πy)`.
    LinearRamp,
}

impl LimitFamily {
    /// Exact averages of `(ρ_r, ρ_c, φ)` over the cells of the `2^k` grid.
    fn cell_averages(self, k: u32) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let m = 1usize << k;
        let h = 1.0 / m as f64;
        match self {
            LimitFamily::Constant => (
                DVector::from_element(m, 1.0),
                DVector::from_element(m, 1.0),
                DMatrix::from_element(m, m, 1.0),
            ),
            LimitFamily::LinearRamp => {
                let mid = |i: usize| (i as f64 + 0.5) * h;
                let cos_avg = |i: usize| ((PI * (i + 1) as f64 * h).sin() - (PI * i as f64 * h).sin()) / (PI * h);
                let cx: Vec<f64> = (0..m).map(cos_avg).collect();
                (
                    DVector::from_fn(m, |i, _| 0.5 + mid(i)),
                    DVector::from_fn(m, |j, _| 1.5 - mid(j)),
                    DMatrix::from_fn(m, m, |i, j| 1.0 + 0.5 * cx[i] * cx[j]),
                )
            }
        }
    }
}

fn default_levels() -> Vec<u32> {
    vec![3, 4, 5, 6]
}

fn default_reference() -> u32 {
    9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitConfig {
    pub family: LimitFamily,
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    /// Level whose bridge and densities stand in for the limit.
    #[serde(default = "default_reference")]
    pub reference_level: u32,
}

/// The level-`k` problem: cell masses of `ρ_r`, `ρ_c` and `φ` on the `2^k` grid.
pub fn limit_level(family: LimitFamily, k: u32) -> Result<ScalingProblem> {
    let (r, c, phi) = family.cell_averages(k);
    let m = r.len() as f64;
    ScalingProblem::new(phi / (m * m), MarginPair::new(r / m, c / m)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitLevelRow {
    pub level: u32,
    pub size: usize,
    /// `d_H(π_k, π_ref)²` on the reference grid.
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub l1_r: f64,
    pub l1_c: f64,
    pub dh_reference: f64,
    pub k_cost: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitReport {
    pub config: LimitConfig,
    pub rows: Vec<LimitLevelRow>,
    pub all_hold: bool,
    /// LHS non-increasing along the configured levels.
    pub lhs_monotone: bool,
}

fn bridge_density(problem: &ScalingProblem) -> Result<GridDensity2D> {
    let pi = sinkhorn_scale(problem, &SinkhornOptions::with_tol(1e-13))?.rescaled;
    kernel_density_2d(&pi, 1.0)
}

pub fn run_deterministic_limit_experiment(cfg: &LimitConfig) -> Result<LimitReport> {
    if cfg.levels.iter().any(|&k| k > cfg.reference_level) || cfg.reference_level > 12 {
        return Err(Error::InvalidArgument(format!(
            "levels {:?} must not exceed the reference level {} (at most 12)",
            cfg.levels, cfg.reference_level
        )));
    }
    let (r, c, phi) = cfg.family.cell_averages(cfg.reference_level);
    let limit = LimitDensities {
        rho_r: GridDensity1D { values: r },
        rho_c: GridDensity1D { values: c },
        phi: GridDensity2D { values: phi },
    };
    let reference = bridge_density(&limit_level(cfg.family, cfg.reference_level)?)?;
    let full = 1usize << cfg.reference_level;
    let mut rows = Vec::with_capacity(cfg.levels.len());
    for &k in &cfg.levels {
        let problem = limit_level(cfg.family, k)?;
        let f = full >> k;
        let pi_k = bridge_density(&problem)?.refine(f, f);
        let lhs = hellinger(&pi_k, &reference)?.powi(2);
        let b = deterministic_limit_rhs(&problem, &limit)?;
        rows.push(LimitLevelRow {
            level: k,
            size: 1 << k,
            lhs,
            rhs: b.rhs,
            holds: lhs <= b.rhs,
            l1_r: b.l1_r,
            l1_c: b.l1_c,
            dh_reference: b.dh_reference,
            k_cost: b.k_cost,
            delta: b.delta,
        });
    }
    Ok(LimitReport {
        config: cfg.clone(),
        all_hold: rows.iter().all(|r| r.holds),
        lhs_monotone: rows.windows(2).all(|w| w[1].lhs <= w[0].lhs),
        rows,
    })
}
