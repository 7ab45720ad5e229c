//! Randomized inequality suites over small discrete instances. Instance `k` of
//! a sweep is generated from `trial_rng(seed, k)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::run_indexed;
use crate::ensembles::trial_rng;
use crate::error::Result;
use crate::measures::{hellinger, kernel_density_2d, total_variation};
use crate::scaling::{
    check_scalability, potential_bounds, sinkhorn_scale, MarginPair, Scalability, ScalabilityMode, ScalingProblem,
    SinkhornOptions,
};
use crate::stability::{
    eps_max, potential_stability_check, stability_checks, stability_constant_ca, DiscreteSsb, PotentialStabilityReport,
    StabilityChecks,
};

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport<T> {
    pub seed: u64,
    pub instances: usize,
    pub violations: usize,
    pub rows: Vec<T>,
}

fn report<T>(seed: u64, rows: Vec<T>, violated: impl Fn(&T) -> bool) -> SweepReport<T> {
    SweepReport {
        seed,
        instances: rows.len(),
        violations: rows.iter().filter(|r| violated(r)).count(),
        rows,
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.gen_range(lo..hi))
}

fn uniform_mat(rng: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.gen_range(lo..hi))
}

/// Two problems on a common `m × n` grid, `m, n ∈ [4, 12]`, with all entries
/// of the references and margins drawn from `U[0.2, 2]`.
pub fn random_ssb_pair(rng: &mut ChaCha8Rng) -> Result<(DiscreteSsb, DiscreteSsb)> {
    let (m, n) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
    let (r, c) = (uniform_vec(rng, m, 0.2, 2.0), uniform_vec(rng, n, 0.2, 2.0));
    let (r2, c2) = (uniform_vec(rng, m, 0.2, 2.0), uniform_vec(rng, n, 0.2, 2.0));
    let (a, b) = (uniform_mat(rng, m, n, 0.2, 2.0), uniform_mat(rng, m, n, 0.2, 2.0));
    Ok((DiscreteSsb::new(a, r, c)?, DiscreteSsb::new(b, r2, c2)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilitySweepRow {
    pub instance_id: u64,
    pub m: usize,
    pub n: usize,
    #[serde(flatten)]
    pub checks: StabilityChecks,
    pub holds: bool,
}

/// Kernel, margin and total stability inequalities on random pairs.
pub fn stability_sweep(instances: usize, seed: u64) -> Result<SweepReport<StabilitySweepRow>> {
    let rows = run_indexed(instances, |k| -> Result<StabilitySweepRow> {
        let (a, b) = random_ssb_pair(&mut trial_rng(seed, k))?;
        let checks = stability_checks(&a, &b, 1e-13)?;
        let holds = checks.kernel.holds && checks.margin.holds && checks.total.holds;
        Ok(StabilitySweepRow {
            instance_id: k,
            m: a.r.len(),
            n: a.c.len(),
            checks,
            holds,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(report(seed, rows, |r| !r.holds))
}

#[derive(Clone, Debug, Serialize)]
pub struct PotentialSweepRow {
    pub instance_id: u64,
    pub m: usize,
    pub n: usize,
    #[serde(flatten)]
    pub check: PotentialStabilityReport,
}

/// An exactly scaled matrix `Y` perturbed entrywise to `Y ∘ (1 + h U)`, with
/// `U ~ U[−1, 1]` and `h` halved until the margin error is below `ε_max`.
fn perturbed_instance(rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, MarginPair)> {
    let (m, n) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
    let r = uniform_vec(rng, m, 0.5, 2.0);
    let c = uniform_vec(rng, n, 0.5, 2.0);
    let c = &c * (r.sum() / c.sum());
    let margins = MarginPair::new(r, c)?;
    let base = uniform_mat(rng, m, n, 0.2, 2.0);
    let y = sinkhorn_scale(
        &ScalingProblem::new(base, margins.clone())?,
        &SinkhornOptions::with_tol(1e-14),
    )?
    .rescaled;
    let u = uniform_mat(rng, m, n, -1.0, 1.0);
    let mut h = rng.gen_range(0.05..1.0) * eps_max(stability_constant_ca(&y, &margins)?);
    loop {
        let a = y.zip_map(&u, |v, w| v * (1.0 + h * w));
        let ca = stability_constant_ca(&a, &margins)?;
        if crate::scaling::margin_error(&a, &margins) < eps_max(ca) {
            return Ok((a, margins));
        }
        h /= 2.0;
    }
}

/// The potential-stability bound `‖(α_A, β_A)‖∞ ≤ 4 C_A ε` on perturbed instances.
pub fn potential_stability_sweep(instances: usize, seed: u64) -> Result<SweepReport<PotentialSweepRow>> {
    let rows = run_indexed(instances, |k| -> Result<PotentialSweepRow> {
        let (a, margins) = perturbed_instance(&mut trial_rng(seed, k))?;
        let check = potential_stability_check(&a, &margins)?;
        Ok(PotentialSweepRow {
            instance_id: k,
            m: a.nrows(),
            n: a.ncols(),
            check,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(report(seed, rows, |r| r.check.within_eps_max && !r.check.holds))
}

#[derive(Clone, Debug, Serialize)]
pub struct SandwichRow {
    pub instance_id: u64,
    pub m: usize,
    pub n: usize,
    pub hellinger: f64,
    pub total_variation: f64,
    /// `d_H² ≤ d_TV`.
    pub lower_holds: bool,
    /// `d_TV ≤ 2√2 d_H`.
    pub upper_holds: bool,
}

fn sparse_density(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(m, n, |_, _| {
        if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        }
    });
    // A shared positive cell keeps the pair away from the disjoint case,
    // where both inequalities are equalities.
    p[(0, 0)] = rng.gen_range(0.1..1.0);
    p
}

/// `d_H² ≤ d_TV ≤ 2√2 d_H` on random piecewise-constant densities with zeros.
pub fn sandwich_sweep(instances: usize, seed: u64) -> Result<SweepReport<SandwichRow>> {
    let rows = run_indexed(instances, |k| -> Result<SandwichRow> {
        let mut rng = trial_rng(seed, k);
        let (m, n) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let (p, q) = (sparse_density(&mut rng, m, n), sparse_density(&mut rng, m, n));
        let p = kernel_density_2d(&p, p.sum())?;
        let q = kernel_density_2d(&q, q.sum())?;
        let dh = hellinger(&p, &q)?;
        let tv = total_variation(&p, &q)?;
        Ok(SandwichRow {
            instance_id: k,
            m,
            n,
            hellinger: dh,
            total_variation: tv,
            lower_holds: dh * dh <= tv,
            upper_holds: tv <= 2.0 * std::f64::consts::SQRT_2 * dh,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(report(seed, rows, |r| !(r.lower_holds && r.upper_holds)))
}

#[derive(Clone, Debug, Serialize)]
pub struct PotentialBoundRow {
    pub instance_id: u64,
    pub lower: f64,
    pub upper: f64,
    /// Extremes of `α(i) + β(j)` over all cells.
    pub min_sum: f64,
    pub max_sum: f64,
    pub holds: bool,
}

/// Containment of `α(i) + β(j)` in the interval of [`potential_bounds`] for
/// random positive problems with unrelated totals of `Λ` and the margins.
pub fn potential_bound_sweep(instances: usize, seed: u64) -> Result<SweepReport<PotentialBoundRow>> {
    let rows = run_indexed(instances, |k| -> Result<PotentialBoundRow> {
        let mut rng = trial_rng(seed, k);
        let (m, n) = (rng.gen_range(2..=10), rng.gen_range(2..=10));
        let lam = uniform_mat(&mut rng, m, n, 0.05, 3.0);
        let total = rng.gen_range(0.5..50.0);
        let r = uniform_vec(&mut rng, m, 0.2, 2.0);
        let c = uniform_vec(&mut rng, n, 0.2, 2.0);
        let margins = MarginPair::new(&r * (total / r.sum()), &c * (total / c.sum()))?;
        let problem = ScalingProblem::new(lam, margins)?;
        let (lower, upper) = potential_bounds(&problem)?;
        let pot = sinkhorn_scale(&problem, &SinkhornOptions::with_tol(1e-12))?.potentials;
        let sums: Vec<f64> = (0..n)
            .flat_map(|j| pot.alpha.iter().map(move |a| (a, j)))
            .map(|(a, j)| a + pot.beta[j])
            .collect();
        let min_sum = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let max_sum = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(PotentialBoundRow {
            instance_id: k,
            lower,
            upper,
            min_sum,
            max_sum,
            holds: lower <= min_sum && max_sum <= upper,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(report(seed, rows, |r| !r.holds))
}

#[derive(Clone, Debug, Serialize)]
pub struct AgreementRow {
    pub instance_id: u64,
    /// Support of the 0/1 matrix, bit `i + m j` for entry `(i, j)`.
    pub pattern: u64,
    pub exact_scalable: bool,
    pub sinkhorn_converged: bool,
    pub agree: bool,
}

/// Sinkhorn budget used as the empirical scalability verdict.
const AGREEMENT_TOL: f64 = 1e-8;
const AGREEMENT_MAX_ITER: usize = 100_000;

/// Exact Menon–Schneider verdicts against Sinkhorn convergence on uniformly
/// drawn `m × n` 0/1 patterns with margins from `U[0.2, 2]`.
pub fn scalability_agreement_sweep(
    instances: usize,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<SweepReport<AgreementRow>> {
    assert!(m * n < 64, "pattern must fit in a u64");
    let rows = run_indexed(instances, |k| -> Result<AgreementRow> {
        let mut rng = trial_rng(seed, k);
        let pattern = rng.gen_range(0..1u64 << (m * n));
        let a = DMatrix::from_fn(m, n, |i, j| (pattern >> (i + m * j) & 1) as f64);
        let r = uniform_vec(&mut rng, m, 0.2, 2.0);
        let c = uniform_vec(&mut rng, n, 0.2, 2.0);
        let margins = MarginPair::new(r.clone(), &c * (r.sum() / c.sum()))?;
        let exact_scalable = check_scalability(&a, &margins, ScalabilityMode::Exact)? == Scalability::Scalable;
        let opts = SinkhornOptions {
            tol: AGREEMENT_TOL,
            max_iter: AGREEMENT_MAX_ITER,
            ..Default::default()
        };
        let sinkhorn_converged = sinkhorn_scale(&ScalingProblem::new(a, margins)?, &opts).is_ok();
        Ok(AgreementRow {
            instance_id: k,
            pattern,
            exact_scalable,
            sinkhorn_converged,
            agree: exact_scalable == sinkhorn_converged,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(report(seed, rows, |r| !r.agree))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweeps_hold() {
        assert_eq!(stability_sweep(20, 1).unwrap().violations, 0);
        let p = potential_stability_sweep(20, 1).unwrap();
        assert!(p.rows.iter().all(|r| r.check.within_eps_max));
        assert_eq!(p.violations, 0);
        assert_eq!(sandwich_sweep(200, 1).unwrap().violations, 0);
        assert_eq!(potential_bound_sweep(100, 1).unwrap().violations, 0);
    }

    #[test]
    fn sweeps_are_reproducible() {
        let a = serde_json::to_string(&stability_sweep(5, 9).unwrap()).unwrap();
        let b = serde_json::to_string(&stability_sweep(5, 9).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&stability_sweep(5, 10).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn four_by_four_patterns_agree() {
        let r = scalability_agreement_sweep(60, 4, 4, 2).unwrap();
        assert_eq!(
            r.violations,
            0,
            "{:?}",
            r.rows.iter().filter(|r| !r.agree).collect::<Vec<_>>()
        );
        // Both verdicts occur in the sample.
        assert!(r.rows.iter().any(|r| r.exact_scalable) && r.rows.iter().any(|r| !r.exact_scalable));
    }
}
