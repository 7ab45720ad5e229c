//! Fluctuation matrices, variance profiles, Gram spectra and the limiting
//! eigenvalue law.

mod dyson;
mod rigidity;

pub use dyson::{solve_dyson, solve_dyson_point, DysonOptions, DysonSolution, DEFAULT_ETA_LADDER};
pub use rigidity::{
    classical_index, classical_locations, rigidity_report, RigidityParams, RigidityReport, RigidityRow,
};

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scaling::Potentials;

/// Dimension `d` in the normalization `(d · s_max)^{-1/2}` of the fluctuation
/// matrices. With `MaxDim` the homogeneous square profile is `S ≡ 1/n` and the
/// Gram spectrum fills `[0, 4]`; `SumDims` gives `S ≤ 1/(m+n)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluctuationScale {
    #[default]
    MaxDim,
    SumDims,
}

impl FluctuationScale {
    pub fn dim(self, m: usize, n: usize) -> f64 {
        match self {
            FluctuationScale::MaxDim => m.max(n) as f64,
            FluctuationScale::SumDims => (m + n) as f64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceProfile {
    pub s: DMatrix<f64>,
    pub s_max: f64,
    pub scale: FluctuationScale,
}

impl VarianceProfile {
    /// `S ≡ 1/d`, the profile of any homogeneous model.
    pub fn homogeneous(m: usize, n: usize, scale: FluctuationScale) -> Self {
        Self {
            s: DMatrix::from_element(m, n, 1.0 / scale.dim(m, n)),
            s_max: 1.0,
            scale,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.s.shape()
    }

    /// `max{0, 1 − n/m}`.
    pub fn atom(&self) -> f64 {
        let (m, n) = self.shape();
        (1.0 - n as f64 / m as f64).max(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct FluctuationPair {
    pub a: DMatrix<f64>,
    pub a_check: DMatrix<f64>,
}

/// `max_ij e^{2α(i)+2β(j)} Var_ij`.
pub fn flatness_smax(pot: &Potentials, var: &DMatrix<f64>) -> Result<f64> {
    check_shape(pot, var)?;
    let mut best = 0.0f64;
    for j in 0..var.ncols() {
        for i in 0..var.nrows() {
            best = best.max((2.0 * (pot.alpha[i] + pot.beta[j])).exp() * var[(i, j)]);
        }
    }
    Ok(best)
}

fn check_shape(pot: &Potentials, x: &DMatrix<f64>) -> Result<()> {
    if pot.alpha.len() != x.nrows() || pot.beta.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "potentials ({}, {}) vs matrix {}x{}",
            pot.alpha.len(),
            pot.beta.len(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// `D(e^α) M D(e^β) / c`.
fn scale_by(pot: &Potentials, x: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let ea = pot.alpha.map(f64::exp);
    let eb = pot.beta.map(f64::exp);
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| ea[i] * x[(i, j)] * eb[j] / c)
}

/// `A` scaled by the potentials of `X`, `Ǎ` by those of `Λ`.
pub fn fluctuation_matrices(
    x: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    pot_x: &Potentials,
    pot_mean: &Potentials,
    s_max: f64,
    scale: FluctuationScale,
) -> Result<FluctuationPair> {
    if x.shape() != lambda.shape() {
        return Err(Error::DimensionMismatch("X and Λ differ in shape".into()));
    }
    check_shape(pot_x, x)?;
    check_shape(pot_mean, x)?;
    if !(s_max > 0.0) {
        return Err(Error::InvalidArgument(format!("s_max must be positive, got {s_max}")));
    }
    let (m, n) = x.shape();
    let c = (scale.dim(m, n) * s_max).sqrt();
    let centered = x - lambda;
    Ok(FluctuationPair {
        a: scale_by(pot_x, &centered, c),
        a_check: scale_by(pot_mean, &centered, c),
    })
}

pub fn variance_profile(
    pot_mean: &Potentials,
    var: &DMatrix<f64>,
    s_max: f64,
    scale: FluctuationScale,
) -> Result<VarianceProfile> {
    check_shape(pot_mean, var)?;
    let (m, n) = var.shape();
    let d = scale.dim(m, n);
    let s = DMatrix::from_fn(m, n, |i, j| {
        (2.0 * (pot_mean.alpha[i] + pot_mean.beta[j])).exp() * var[(i, j)] / (d * s_max)
    });
    let cap = 1.0 / d + 1e-12;
    let top = s.max();
    if top > cap || !top.is_finite() {
        return Err(Error::FlatnessViolated { value: top, cap });
    }
    Ok(VarianceProfile { s, s_max, scale })
}

/// Limiting eigenvalue density `√(4−τ)/(2π√τ)` of the square homogeneous Gram matrix.
pub fn mp_density(tau: f64) -> f64 {
    if tau > 0.0 && tau < 4.0 {
        (4.0 - tau).sqrt() / (2.0 * PI * tau.sqrt())
    } else {
        0.0
    }
}

/// Distribution function of [`mp_density`]; with `s = √τ` it is the
/// quarter-circle distribution `[(s/2)√(4−s²) + 2 asin(s/2)]/π`.
pub fn mp_cdf(tau: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    if tau >= 4.0 {
        return 1.0;
    }
    let s = tau.sqrt();
    (s / 2.0 * (4.0 - tau).sqrt() + 2.0 * (s / 2.0).asin()) / PI
}

/// Quarter-circle density `√(4−s²)/π` on `[0, 2]`.
pub fn quarter_circle_density(s: f64) -> f64 {
    if (0.0..2.0).contains(&s) {
        (4.0 - s * s).sqrt() / PI
    } else {
        0.0
    }
}

fn symmetric_eigs(sym: DMatrix<f64>) -> Result<DVector<f64>> {
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("input has non-finite entries".into()));
    }
    let ev = sym.symmetric_eigenvalues();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("eigenvalues are not finite".into()));
    }
    Ok(ev)
}

/// Eigenvalues of `A Aᵀ`, ascending, with round-off negatives clamped to 0.
pub fn gram_eigenvalues(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ev = symmetric_eigs(a * a.transpose())?;
    if let Some(v) = ev.iter().find(|&&v| v < -1e-10 * (1.0 + a.norm_squared())) {
        return Err(Error::EigensolverFailure(format!("Gram eigenvalue {v:e} is negative")));
    }
    let mut out: Vec<f64> = ev.iter().map(|v| v.max(0.0)).collect();
    out.sort_by(f64::total_cmp);
    Ok(DVector::from_vec(out))
}

/// Singular values, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("input has non-finite entries".into()));
    }
    let svd = SVD::try_new(a.clone(), false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::EigensolverFailure("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(DVector::from_vec(s))
}

pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(singular_values(a)?[0])
}

/// `‖A Aᵀ − Ǎ Ǎᵀ‖₂`.
pub fn covariance_deviation(pair: &FluctuationPair) -> Result<f64> {
    let diff = &pair.a * pair.a.transpose() - &pair.a_check * pair.a_check.transpose();
    Ok(symmetric_eigs(diff)?.amax())
}

/// Push a density on `λ > 0` forward under `λ ↦ √λ`: returns `(s, 2s f(s²))`.
pub fn singular_pushforward(grid: &DVector<f64>, density: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let s = grid.map(f64::sqrt);
    let f = DVector::from_iterator(s.len(), s.iter().zip(density.iter()).map(|(s, f)| 2.0 * s * f));
    (s, f)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of `samples`
/// and a continuous distribution function.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Normalized so that `Σ density · width = (fraction of samples inside)`.
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in samples {
            if x >= lo && x <= hi {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        let total = samples.len() as f64;
        Self {
            edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
            density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// `Σ density · width`.
    pub fn mass(&self) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.density)
            .map(|(w, d)| d * (w[1] - w[0]))
            .sum()
    }

    /// `Σ_k |density_k − (F(e_{k+1}) − F(e_k))/width_k| · width_k` for a model CDF `F`.
    pub fn l1_to_cdf<F: Fn(f64) -> f64>(&self, cdf: F) -> f64 {
        self.edges
            .windows(2)
            .zip(&self.density)
            .map(|(w, d)| (d * (w[1] - w[0]) - (cdf(w[1]) - cdf(w[0]))).abs())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{sample_matrix, EntryKind};
    use crate::scaling::{sinkhorn_scale, MarginPair, ScalingProblem, SinkhornOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pot(alpha: Vec<f64>, beta: Vec<f64>) -> Potentials {
        Potentials {
            alpha: DVector::from_vec(alpha),
            beta: DVector::from_vec(beta),
            gauge: Default::default(),
        }
    }

    #[test]
    fn smax_cases() {
        let v = DMatrix::from_element(3, 4, 0.7);
        assert_eq!(flatness_smax(&Potentials::zeros(3, 4), &v).unwrap(), 0.7);

        // Homogeneous Poisson(λ), r = c = a·1: α + β = log(a/(nλ)), s_max = a²/(n²λ).
        let (n, a, l) = (30usize, 9.0, 0.4);
        let p = ScalingProblem::new(
            DMatrix::from_element(n, n, l),
            MarginPair::new(DVector::from_element(n, a), DVector::from_element(n, a)).unwrap(),
        )
        .unwrap();
        let res = sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-13)).unwrap();
        let smax = flatness_smax(&res.potentials, &DMatrix::from_element(n, n, l)).unwrap();
        let expect = a * a / ((n * n) as f64 * l);
        assert!((smax / expect - 1.0).abs() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = pot(
            (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let var = DMatrix::from_fn(5, 6, |_, _| rng.gen_range(0.1..2.0));
        let mut brute = f64::MIN;
        for i in 0..5 {
            for j in 0..6 {
                brute = brute.max((p.alpha[i] + p.beta[j]).exp().powi(2) * var[(i, j)]);
            }
        }
        assert!((flatness_smax(&p, &var).unwrap() / brute - 1.0).abs() < 1e-14);
    }

    #[test]
    fn fluctuation_degenerate_cases() {
        let lam = DMatrix::from_fn(3, 4, |i, j| 1.0 + (i * j) as f64);
        let p1 = pot(vec![0.1, -0.2, 0.3], vec![0.0, 0.5, -0.5, 0.2]);
        let p2 = pot(vec![0.0, 0.1, 0.3], vec![0.4, 0.5, -0.1, 0.2]);
        let pair = fluctuation_matrices(&lam, &lam, &p1, &p2, 1.0, FluctuationScale::MaxDim).unwrap();
        assert_eq!(pair.a.amax(), 0.0);
        assert_eq!(pair.a_check.amax(), 0.0);
        let x = lam.map(|v| v + 0.5);
        let pair = fluctuation_matrices(&x, &lam, &p1, &p1, 2.0, FluctuationScale::SumDims).unwrap();
        assert_eq!(pair.a, pair.a_check);
        assert!((pair.a[(0, 0)] - 0.1f64.exp() * 0.5 / (14.0f64).sqrt()).abs() < 1e-15);
        assert_eq!(covariance_deviation(&pair).unwrap(), 0.0);
    }

    #[test]
    fn profile_flatness() {
        let n = 20;
        let p = Potentials::zeros(n, n);
        let var = DMatrix::from_fn(n, n, |i, j| 1.0 + ((i + 2 * j) % 3) as f64);
        let smax = flatness_smax(&p, &var).unwrap();
        for scale in [FluctuationScale::MaxDim, FluctuationScale::SumDims] {
            let prof = variance_profile(&p, &var, smax, scale).unwrap();
            assert!((prof.s.max() - 1.0 / scale.dim(n, n)).abs() < 1e-15);
        }
        let homo = variance_profile(&p, &DMatrix::from_element(n, n, 0.4), 0.4, FluctuationScale::SumDims).unwrap();
        assert!(homo.s.iter().all(|&v| (v - 1.0 / 40.0).abs() < 1e-15));
        assert!(matches!(
            variance_profile(&p, &var, smax / 2.0, FluctuationScale::MaxDim),
            Err(Error::FlatnessViolated { .. })
        ));
    }

    #[test]
    fn comparison_entries_have_profile_variance() {
        // Var(Ǎ_ij) over 10⁴ draws against S_ij for a 3×4 Poisson model.
        let lam = DMatrix::from_fn(3, 4, |i, j| 0.5 + 0.5 * (i + j) as f64);
        let p = pot(vec![0.2, -0.1, 0.0], vec![0.1, 0.0, -0.3, 0.25]);
        let smax = flatness_smax(&p, &lam).unwrap();
        let prof = variance_profile(&p, &lam, smax, FluctuationScale::MaxDim).unwrap();
        let trials = 10_000;
        let mut acc = DMatrix::zeros(3, 4);
        for t in 0..trials {
            let x = sample_matrix(&lam, EntryKind::Poisson, 17, t).unwrap();
            let pair = fluctuation_matrices(&x, &lam, &p, &p, smax, FluctuationScale::MaxDim).unwrap();
            acc += pair.a_check.map(|v| v * v);
        }
        acc /= trials as f64;
        for (e, s) in acc.iter().zip(prof.s.iter()) {
            assert!((e / s - 1.0).abs() < 0.05, "{e} vs {s}");
        }
    }

    #[test]
    fn mp_closed_forms() {
        assert_eq!(mp_density(4.0), 0.0);
        assert!((mp_density(2.0) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        // Midpoint rule in s = √τ, where the density is the bounded quarter circle.
        let steps = 200_000;
        let h = 2.0 / steps as f64;
        let mass: f64 = (0..steps)
            .map(|k| {
                let s = (k as f64 + 0.5) * h;
                2.0 * s * mp_density(s * s) * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-6);
        assert!((mp_cdf(4.0) - 1.0).abs() < 1e-15);
        assert!((mp_cdf(1.0) - (3f64.sqrt() / 2.0 + 2.0 * 0.5f64.asin()) / PI).abs() < 1e-15);
        for &t in &[0.3, 1.0, 2.5] {
            let h = 1e-6;
            let deriv = (mp_cdf(t + h) - mp_cdf(t - h)) / (2.0 * h);
            assert!((deriv - mp_density(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn pushforward_gives_quarter_circle() {
        let grid = DVector::from_fn(400, |k, _| 4.0 * (k as f64 + 0.5) / 400.0);
        let dens = grid.map(mp_density);
        let (s, f) = singular_pushforward(&grid, &dens);
        for (s, f) in s.iter().zip(f.iter()) {
            assert!((f - quarter_circle_density(*s)).abs() < 1e-12);
        }
        // Trapezoid rule on the transformed grid; the density is bounded near
        // s = 0, so the first gap contributes s₀ f(s₀).
        let mass: f64 = s[0] * f[0]
            + s.as_slice()
                .windows(2)
                .zip(f.as_slice().windows(2))
                .map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0]))
                .sum::<f64>();
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        let (s, f) = singular_pushforward(&DVector::from_element(1, 1.0), &DVector::from_element(1, 3.0));
        assert_eq!((s[0], f[0]), (1.0, 6.0));
    }

    #[test]
    fn gram_eigenvalue_cases() {
        let ev = gram_eigenvalues(&DMatrix::identity(4, 4)).unwrap();
        assert!(ev.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let ev = gram_eigenvalues(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 4.0).abs() < 1e-14);
        assert!(matches!(
            gram_eigenvalues(&DMatrix::from_element(2, 2, f64::NAN)),
            Err(Error::EigensolverFailure(_))
        ));
    }

    #[test]
    fn gram_eigenvalues_match_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(m, n) in &[(5usize, 7usize), (40, 30), (300, 400)] {
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let ev = gram_eigenvalues(&a).unwrap();
            let mut sv: Vec<f64> = singular_values(&a).unwrap().iter().map(|s| s * s).collect();
            sv.truncate(m);
            sv.resize(m, 0.0);
            sv.sort_by(f64::total_cmp);
            let top = ev.max();
            for (e, s) in ev.iter().zip(&sv) {
                assert!((e - s).abs() <= 1e-8 * top.max(1.0) + 1e-8 * s, "{e} vs {s}");
            }
        }
    }

    #[test]
    fn covariance_deviation_rank_one() {
        // Ǎ = 0 and A = u vᵀ: ‖A Aᵀ‖₂ = |u|²|v|².
        let u = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let v = DVector::from_vec(vec![0.0, 3.0, 4.0, 0.0]);
        let pair = FluctuationPair {
            a: &u * v.transpose(),
            a_check: DMatrix::zeros(3, 4),
        };
        assert!((covariance_deviation(&pair).unwrap() - 9.0 * 25.0).abs() < 1e-10);
        assert!((spectral_norm(&pair.a).unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn ks_and_histogram() {
        let xs: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance(&xs, |x| x.clamp(0.0, 1.0)) <= 5e-4 + 1e-12);
        assert!((ks_distance(&xs, |_| 0.0) - 1.0).abs() < 1e-12);
        let h = Histogram::new(&xs, 0.0, 1.0, 10);
        assert!((h.mass() - 1.0).abs() < 1e-12);
        assert!(h.density.iter().all(|&d| (d - 1.0).abs() < 1e-12));
        assert!(h.l1_to_cdf(|x| x).abs() < 1e-12);
    }
}
