//! Gaussian fluctuations of the potentials of an averaged matrix `X̄_M`.
//!
//! Linearizing the margin equations at `Λ` gives `L δ = −H vec(X̄ − Λ)`, so the
//! kernel-orthogonal part of the deviation is `−L† H vec(X̄ − Λ)` and its
//! limiting covariance is `L† H Σ Hᵀ L†`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::run_indexed;
use crate::ensembles::{trial_rng, variance_matrix, EntryKind};
use crate::error::{Error, Result};
use crate::scaling::{
    gauge_fix, sinkhorn_scale, sinkhorn_scale_warm, Gauge, MarginPair, Potentials, ScalingProblem, SinkhornOptions,
};

/// Eigenvalues of `L` below this multiple of the largest count as zero.
const RANK_RTOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CltModel {
    pub l: DMatrix<f64>,
    pub l_dagger: DMatrix<f64>,
    /// Entry variances; `Σ = diag(vec(var))`.
    pub var: DMatrix<f64>,
    /// `H Σ Hᵀ`.
    pub h_sigma_ht: DMatrix<f64>,
    pub theory_cov: DMatrix<f64>,
    /// Mean potentials in the `BetaCWeighted` gauge.
    pub potentials: Potentials,
    /// `e^{α(i)+β(j)}`.
    scale: DMatrix<f64>,
}

impl CltModel {
    /// `H vec(Δ) = ((D(e^α)ΔD(e^β)) 1_n ; (D(e^α)ΔD(e^β))ᵀ 1_m)`.
    pub fn apply_h(&self, delta: &DMatrix<f64>) -> DVector<f64> {
        let w = self.scale.component_mul(delta);
        let (m, n) = w.shape();
        let rows = w.column_sum();
        let cols = w.row_sum();
        DVector::from_fn(m + n, |k, _| if k < m { rows[k] } else { cols[k - m] })
    }

    /// First-order deviation `−L† H vec(Δ)`, kernel-orthogonal.
    pub fn linearized(&self, delta: &DMatrix<f64>) -> DVector<f64> {
        -(&self.l_dagger * self.apply_h(delta))
    }
}

/// Builds `L`, its pseudoinverse and the limiting covariance for the mean
/// `problem.lambda()` with independent entries of variance `var`.
pub fn clt_covariance(problem: &ScalingProblem, var: &DMatrix<f64>) -> Result<CltModel> {
    let lam = problem.lambda();
    if var.shape() != lam.shape() {
        return Err(Error::DimensionMismatch("variance matrix vs mean".into()));
    }
    if let Some(((i, j), _)) = lam
        .iter()
        .enumerate()
        .map(|(k, v)| ((k % lam.nrows(), k / lam.nrows()), v))
        .find(|(_, v)| **v <= 0.0)
    {
        return Err(Error::ZeroEntry { i, j });
    }
    let (m, n) = lam.shape();
    let mg = problem.margins();
    let potentials = sinkhorn_scale(problem, &SinkhornOptions::with_tol(1e-13))?.potentials;
    let scale = DMatrix::from_fn(m, n, |i, j| (potentials.alpha[i] + potentials.beta[j]).exp());
    let bridge = scale.component_mul(lam);

    let mut l = DMatrix::zeros(m + n, m + n);
    for i in 0..m {
        l[(i, i)] = mg.r()[i];
    }
    for j in 0..n {
        l[(m + j, m + j)] = mg.c()[j];
    }
    l.view_mut((0, m), (m, n)).copy_from(&bridge);
    l.view_mut((m, 0), (n, m)).copy_from(&bridge.transpose());
    let l_dagger = pseudoinverse(&l)?;

    let v = var.component_mul(&scale).component_mul(&scale);
    let mut h_sigma_ht = DMatrix::zeros(m + n, m + n);
    let (rows, cols) = (v.column_sum(), v.row_sum());
    for i in 0..m {
        h_sigma_ht[(i, i)] = rows[i];
    }
    for j in 0..n {
        h_sigma_ht[(m + j, m + j)] = cols[j];
    }
    h_sigma_ht.view_mut((0, m), (m, n)).copy_from(&v);
    h_sigma_ht.view_mut((m, 0), (n, m)).copy_from(&v.transpose());

    let mut theory_cov = &l_dagger * &h_sigma_ht * &l_dagger;
    theory_cov = (&theory_cov + theory_cov.transpose()) * 0.5;
    Ok(CltModel {
        l,
        l_dagger,
        var: var.clone(),
        h_sigma_ht,
        theory_cov,
        potentials,
        scale,
    })
}

/// Moore–Penrose pseudoinverse of a symmetric matrix whose kernel must be
/// exactly one-dimensional.
fn pseudoinverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = l.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if !top.is_finite() {
        return Err(Error::EigensolverFailure("non-finite eigenvalue of L".into()));
    }
    let cut = RANK_RTOL * top;
    let kernel = eig.eigenvalues.iter().filter(|v| v.abs() <= cut).count();
    if kernel != 1 {
        return Err(Error::RankDeficiencyUnexpected(kernel));
    }
    let d = l.nrows();
    let mut out = DMatrix::zeros(d, d);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > cut {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltConfig {
    pub m: usize,
    pub n: usize,
    /// Means are drawn once from `U[mean_lo, mean_hi]`.
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub dist: EntryKind,
    /// `M`, the number of matrices averaged per replicate.
    pub sample_size: usize,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

impl CltConfig {
    /// The 3 × 4 Poisson setting with means in `[1, 5]`.
    pub fn small_poisson(sample_size: usize, replicates: usize) -> Self {
        Self {
            m: 3,
            n: 4,
            mean_lo: 1.0,
            mean_hi: 5.0,
            dist: EntryKind::Poisson,
            sample_size,
            replicates,
            seed: 0,
        }
    }

    /// Mean matrix and the uniform margins of the same total.
    pub fn problem(&self) -> Result<ScalingProblem> {
        if self.m == 0 || self.n == 0 || self.sample_size == 0 || self.replicates < 2 {
            return Err(Error::InfeasibleSpec(
                "m, n and sample_size must be positive and replicates at least 2".into(),
            ));
        }
        if !(self.mean_lo > 0.0 && self.mean_hi >= self.mean_lo && self.mean_hi.is_finite()) {
            return Err(Error::InfeasibleSpec(format!(
                "mean range [{}, {}] must be positive and ordered",
                self.mean_lo, self.mean_hi
            )));
        }
        // A stream no replicate uses.
        let mut rng = trial_rng(self.seed, u64::MAX);
        let lam = DMatrix::from_fn(self.m, self.n, |_, _| {
            if self.mean_hi > self.mean_lo {
                rng.gen_range(self.mean_lo..self.mean_hi)
            } else {
                self.mean_lo
            }
        });
        lam.iter().try_for_each(|&v| self.dist.check_mean(v))?;
        let total = lam.sum();
        ScalingProblem::new(lam, MarginPair::uniform(self.m, self.n, total)?)
    }
}

/// Per-coordinate normality diagnostics of the recorded deviations.
#[derive(Clone, Debug, Serialize)]
pub struct CoordinateStats {
    pub mean: f64,
    /// Empirical standard deviation over the predicted one.
    pub std_ratio: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// KS distance to `N(0, theory variance)`.
    pub ks_normal: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltReport {
    pub config: CltConfig,
    pub failed: usize,
    pub lambda: Vec<Vec<f64>>,
    pub theory_cov: Vec<Vec<f64>>,
    pub empirical_cov: Vec<Vec<f64>>,
    /// `‖Ĉ − C‖_F / ‖C‖_F` for the recorded deviations.
    pub rel_frobenius_error: f64,
    /// Same for the linearized deviations `−√M L† H vec(X̄ − Λ)` on the same draws.
    pub linearized_rel_error: f64,
    /// `‖Ĉ − Ĉ_lin‖_F / ‖C‖_F`: the nonlinear remainder with the shared
    /// sampling noise cancelled.
    pub control_variate_error: f64,
    /// `max |Σ_j δβ(j) c(j)|` over replicates, in the `BetaCWeighted` gauge.
    pub max_gauge_residual: f64,
    pub coordinates: Vec<CoordinateStats>,
}

/// Draws `X̄_M`. Poisson means are closed under sums, so the Poisson case
/// uses one draw of mean `Mλ` per entry.
fn sample_average<R: Rng + ?Sized>(lam: &DMatrix<f64>, kind: EntryKind, count: usize, rng: &mut R) -> DMatrix<f64> {
    let mf = count as f64;
    match kind {
        EntryKind::Poisson => lam.map(|l| EntryKind::Poisson.sample(mf * l, rng) / mf),
        _ => lam.map(|l| (0..count).map(|_| kind.sample(l, rng)).sum::<f64>() / mf),
    }
}

fn covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let d = samples[0].len();
    let k = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |a, s| a + s) / k;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov / (k - 1.0)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn run_clt_experiment(cfg: &CltConfig) -> Result<CltReport> {
    let problem = cfg.problem()?;
    let lam = problem.lambda();
    let margins = problem.margins();
    let model = clt_covariance(&problem, &variance_matrix(lam, cfg.dist))?;
    let root_m = (cfg.sample_size as f64).sqrt();
    let (m, n) = (cfg.m, cfg.n);

    // (BetaCWeighted deviation, linearized deviation) per replicate.
    let draws = run_indexed(cfg.replicates, |rep| {
        let mut rng = trial_rng(cfg.seed, rep);
        let xbar = sample_average(lam, cfg.dist, cfg.sample_size, &mut rng);
        let lin = model.linearized(&(&xbar - lam)) * root_m;
        let scaled = ScalingProblem::new(xbar, margins.clone())
            .and_then(|p| sinkhorn_scale_warm(&p, &SinkhornOptions::with_tol(1e-13), &model.potentials));
        scaled.ok().map(|res| {
            let pot = gauge_fix(&res.potentials, margins, Gauge::BetaCWeighted);
            let dev = Potentials {
                alpha: (&pot.alpha - &model.potentials.alpha) * root_m,
                beta: (&pot.beta - &model.potentials.beta) * root_m,
                gauge: Gauge::BetaCWeighted,
            };
            (dev, lin)
        })
    });
    let ok: Vec<&(Potentials, DVector<f64>)> = draws.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::InfeasibleSpec(
            "fewer than two replicates could be scaled".into(),
        ));
    }
    let max_gauge_residual = ok
        .iter()
        .map(|(d, _)| d.beta.dot(margins.c()).abs())
        .fold(0.0, f64::max);
    let devs: Vec<DVector<f64>> = ok
        .iter()
        .map(|(d, _)| {
            let ko = gauge_fix(d, margins, Gauge::KernelOrthogonal);
            DVector::from_iterator(m + n, ko.alpha.iter().chain(ko.beta.iter()).copied())
        })
        .collect();
    let lins: Vec<DVector<f64>> = ok.iter().map(|(_, l)| l.clone()).collect();

    let emp = covariance(&devs);
    let emp_lin = covariance(&lins);
    let c = &model.theory_cov;
    let cn = c.norm();
    let coordinates = (0..m + n)
        .map(|k| coordinate_stats(devs.iter().map(|d| d[k]).collect(), c[(k, k)]))
        .collect();
    Ok(CltReport {
        config: cfg.clone(),
        failed: draws.len() - ok.len(),
        lambda: rows(lam),
        theory_cov: rows(c),
        empirical_cov: rows(&emp),
        rel_frobenius_error: (&emp - c).norm() / cn,
        linearized_rel_error: (&emp_lin - c).norm() / cn,
        control_variate_error: (&emp - &emp_lin).norm() / cn,
        max_gauge_residual,
        coordinates,
    })
}

fn coordinate_stats(mut xs: Vec<f64>, theory_var: f64) -> CoordinateStats {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let moment = |p: i32| xs.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / k;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));
    let sd = theory_var.max(0.0).sqrt();
    xs.sort_by(f64::total_cmp);
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf(x / (sd * std::f64::consts::SQRT_2)));
    CoordinateStats {
        mean,
        std_ratio: (m2 * k / (k - 1.0)).sqrt() / sd,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        ks_normal: crate::spectral::ks_distance(&xs, cdf),
    }
}
