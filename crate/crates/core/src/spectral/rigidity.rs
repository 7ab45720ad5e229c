use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::DysonSolution;

/// Density level above which a grid cell counts as part of `supp(ν)`.
const SUPPORT_LEVEL: f64 = 1e-3;

/// `i(τ) = ⌈m ν([0, τ])⌉` (1-based, clamped to `[1, m]`) at every grid point.
pub fn classical_locations(sol: &DysonSolution, m: usize) -> Vec<usize> {
    sol.grid.iter().map(|&t| classical_index(sol, m, t)).collect()
}

pub fn classical_index(sol: &DysonSolution, m: usize, tau: f64) -> usize {
    let idx = (m as f64 * sol.normalized_cdf_at(tau)).ceil();
    (idx.max(1.0) as usize).min(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidityParams {
    pub eps: f64,
    /// Lower energy cutoff for the rectangular bound.
    pub delta: f64,
    /// Density threshold `ε*` for the bulk.
    pub eps_star: f64,
    pub eps_cov: f64,
    pub square: bool,
}

impl RigidityParams {
    pub fn new(square: bool) -> Self {
        Self {
            eps: 0.5,
            delta: 0.05,
            eps_star: 0.05,
            eps_cov: 0.0,
            square,
        }
    }

    /// `m^ε/m (√τ + 1/m) + ε_cov` when square, `m^ε/m + ε_cov` otherwise.
    pub fn bound(&self, m: usize, tau: f64) -> f64 {
        let mf = m as f64;
        let base = mf.powf(self.eps) / mf;
        if self.square {
            base * (tau.sqrt() + 1.0 / mf) + self.eps_cov
        } else {
            base + self.eps_cov
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RigidityRow {
    pub tau: f64,
    pub index: usize,
    pub eigenvalue: f64,
    pub deviation: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RigidityReport {
    pub params: RigidityParams,
    pub max_dev_in_bulk: f64,
    /// Distinct eigenvalue indices `i(τ)` whose deviation reaches the bound.
    pub violations: usize,
    /// Eigenvalues at distance `≥ ε* + ε_cov` from the support.
    pub outside_support: usize,
    pub rows: Vec<RigidityRow>,
}

/// Compares `eigs` (ascending, as produced by a Gram eigensolver and used as
/// given) with the classical locations of `sol`.
pub fn rigidity_report(eigs: &DVector<f64>, sol: &DysonSolution, params: RigidityParams) -> RigidityReport {
    let m = eigs.len();
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    let mut max_dev = 0.0f64;
    for (&tau, &dens) in sol.grid.iter().zip(sol.density.iter()) {
        if dens < params.eps_star || tau > 4.0 || (!params.square && tau <= params.delta) {
            continue;
        }
        let index = classical_index(sol, m, tau);
        let eigenvalue = eigs[index - 1];
        let deviation = (eigenvalue - tau).abs();
        let bound = params.bound(m, tau);
        if deviation >= bound {
            bad.push(index);
        }
        max_dev = max_dev.max(deviation);
        rows.push(RigidityRow {
            tau,
            index,
            eigenvalue,
            deviation,
            bound,
        });
    }
    bad.sort_unstable();
    bad.dedup();

    let mut support: Vec<f64> = sol
        .grid
        .iter()
        .zip(sol.density.iter())
        .filter(|(_, &f)| f >= SUPPORT_LEVEL)
        .map(|(&t, _)| t)
        .collect();
    if sol.atom > 0.0 {
        support.insert(0, 0.0);
    }
    let far = params.eps_star + params.eps_cov;
    let outside_support = eigs
        .iter()
        .filter(|&&l| support.iter().map(|s| (l - s).abs()).fold(f64::INFINITY, f64::min) >= far)
        .count();

    RigidityReport {
        params,
        max_dev_in_bulk: max_dev,
        violations: bad.len(),
        outside_support,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{mp_cdf, solve_dyson, DysonOptions, FluctuationScale, VarianceProfile};

    fn mp_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 4.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mp_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn square_solution() -> DysonSolution {
        solve_dyson(
            &VarianceProfile::homogeneous(100, 100, FluctuationScale::MaxDim),
            &DysonOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn classical_index_cases() {
        let sol = square_solution();
        assert_eq!(classical_index(&sol, 101, 4.15), 101);
        assert_eq!(*classical_locations(&sol, 101).last().unwrap(), 101);
        assert_eq!(classical_index(&sol, 101, mp_quantile(0.5)), 51);

        let tall = solve_dyson(
            &VarianceProfile::homogeneous(200, 100, FluctuationScale::MaxDim),
            &DysonOptions::default(),
        )
        .unwrap();
        // Below the lower edge (1 − 1/√2)² ≈ 0.086 only the atom has mass.
        // ⌈m π*⌉ with m odd, so the index does not sit on a rounding boundary.
        assert_eq!(classical_index(&tall, 201, 0.02), 101);
    }

    #[test]
    fn synthetic_eigenvalues() {
        let sol = square_solution();
        let m = 401;
        let eigs = DVector::from_fn(m, |i, _| mp_quantile((i as f64 + 0.5) / m as f64));
        let params = RigidityParams::new(true);
        let report = rigidity_report(&eigs, &sol, params);
        assert!(!report.rows.is_empty());
        assert_eq!(report.violations, 0);
        assert_eq!(report.outside_support, 0);

        let row = report.rows.iter().find(|r| r.tau > 1.0).unwrap().clone();
        let mut shifted = eigs.clone();
        shifted[row.index - 1] += 2.0 * row.bound;
        let report = rigidity_report(&shifted, &sol, params);
        assert_eq!(report.violations, 1);

        let mut far = eigs.clone();
        far[m - 1] = 4.5;
        assert_eq!(rigidity_report(&far, &sol, params).outside_support, 1);
    }

    #[test]
    fn bounds() {
        let sq = RigidityParams {
            eps_cov: 0.1,
            ..RigidityParams::new(true)
        };
        assert!((sq.bound(100, 4.0) - (0.1 * 2.01 + 0.1)).abs() < 1e-12);
        let rect = RigidityParams {
            eps_cov: 0.1,
            ..RigidityParams::new(false)
        };
        assert!((rect.bound(100, 4.0) - 0.2).abs() < 1e-12);
    }
}
