//! Explicit constants of the stability and concentration bounds, and
//! evaluators that check the inequalities on concrete instances.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{
    cost_bound_k, delta_smoothness, discrete_hellinger, hellinger, histogram_density_1d, kernel_density_2d,
    l1_density_distance, GridDensity1D, GridDensity2D,
};
use crate::scaling::{
    gauge_distance, margin_error, sinkhorn_scale, MarginPair, Potentials, ScalingProblem, SinkhornOptions,
};
use crate::spectral::FluctuationScale;

/// `ρ_A = min_{i₁,i₂} n⁻¹ Σ_j A_{i₁j} A_{i₂j}`.
pub fn row_alignment(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols() as f64;
    (a * a.transpose()).min() / n
}

/// `C_A = 1 + 9 max r max c / (ρ_A m n)`.
pub fn stability_constant_ca(a: &DMatrix<f64>, margins: &MarginPair) -> Result<f64> {
    let rho = row_alignment(a);
    if !(rho > 0.0) {
        return Err(Error::ZeroAlignment);
    }
    let (m, n) = a.shape();
    Ok(1.0 + 9.0 * margins.r().max() * margins.c().max() / (rho * (m * n) as f64))
}

pub fn eps_max(c_a: f64) -> f64 {
    1.0 / (50.0 * c_a * c_a)
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityConstants {
    pub rho_a: f64,
    pub c_a: f64,
    pub eps_max: f64,
    pub c_star: f64,
    pub eps0: f64,
    pub eps_pot: f64,
    pub tau: f64,
    pub t_d: f64,
    pub phi: f64,
    pub eps_cov: f64,
    // Inputs the constants were evaluated at.
    pub k_cost: f64,
    pub delta: f64,
    pub lambda_l1: f64,
    pub total: f64,
    pub sigma: f64,
    pub r_param: f64,
    pub d_param: f64,
    pub s_max: f64,
    pub m: usize,
    pub n: usize,
}

impl StabilityConstants {
    /// Radius of event E₁: `4 C* ε₀`.
    pub fn e1_radius(&self) -> f64 {
        4.0 * self.c_star * self.eps0
    }

    /// Bound of event E₂ on `(1/N) ‖D(e^{α_X})(X−Λ)D(e^{β_X}) − D(e^α)(X−Λ)D(e^β)‖₂`.
    pub fn e2_bound(&self) -> f64 {
        3.0 * (2.0 * self.k_cost).exp() * self.eps_pot * self.t_d / self.lambda_l1
    }

    /// Bound of event E₃ on `(1/N) ‖X^{r,c} − X̂^{r,c}‖₁`.
    pub fn e3_bound(&self) -> f64 {
        2.0 * self.eps_pot * (2.0 * self.k_cost).exp()
    }

    /// Whether the smallness condition `ε₀ ≤ 1/(50 C*²)` holds.
    pub fn eps0_admissible(&self) -> bool {
        self.eps0 <= eps_max(self.c_star)
    }

    /// Right-hand side of the test-function approximation for `‖g‖∞ = g_sup`.
    pub fn test_function_rhs(&self, g_sup: f64) -> f64 {
        let e2k = (2.0 * self.k_cost).exp();
        let mn = (self.m * self.n) as f64;
        2.0 * g_sup * self.eps_pot * e2k
            + g_sup * e2k / self.lambda_l1 * (self.sigma * (2.0 * mn * self.tau).sqrt() + 2.0 * self.r_param * self.tau)
    }
}

/// Evaluates every constant of the concentration, comparison and covariance
/// bounds for mean `Λ`, sub-exponential parameters `(σ, R)` and confidence `D`.
/// `s_max` enters only `ε_cov`.
pub fn concentration_constants(
    problem: &ScalingProblem,
    sigma: f64,
    r_param: f64,
    d_param: f64,
    s_max: f64,
    scale: FluctuationScale,
) -> Result<StabilityConstants> {
    if !(d_param > 0.0) {
        return Err(Error::InvalidArgument(format!("D must be positive, got {d_param}")));
    }
    let lam = problem.lambda();
    let mg = problem.margins();
    let (m, n) = lam.shape();
    let k_cost = cost_bound_k(problem)?;
    let delta = delta_smoothness(mg)?;
    let l1 = lam.sum();
    let (lmin, lmax) = (lam.min(), lam.max());
    let big = m.max(n) as f64;
    let (mf, nf) = (m as f64, n as f64);

    let tau = (d_param + 1.0) * big.ln() + 4f64.ln();
    let t_d = sigma * (2.0 * big * tau).sqrt() + 2.0 * r_param * tau;
    let eps0 = (2.0 * k_cost).exp() * big / (delta * l1) * t_d;
    let c_star = 1.0 + 18.0 * (8.0 * k_cost).exp() * l1 * l1 / (delta * delta * lmin * lmin * mf * mf * nf * nf);
    let spread = sigma + r_param + lmax;
    let phi = (nf * (lmin / spread).powi(4)).min(nf.sqrt() * lmin / spread);
    let eps_pot = 16.0 * c_star * eps0;
    let total = mg.total();
    let eps_cov = 3.0 * (4.0 * k_cost).exp() * total * total / (scale.dim(m, n) * s_max * l1 * l1)
        * eps_pot
        * t_d
        * t_d
        * (2.0 + 3.0 * eps_pot);

    let rho_a = row_alignment(lam);
    let c_a = stability_constant_ca(lam, mg)?;
    Ok(StabilityConstants {
        rho_a,
        c_a,
        eps_max: eps_max(c_a),
        c_star,
        eps0,
        eps_pot,
        tau,
        t_d,
        phi,
        eps_cov,
        k_cost,
        delta,
        lambda_l1: l1,
        total,
        sigma,
        r_param,
        d_param,
        s_max,
        m,
        n,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PotentialStabilityReport {
    /// Max relative deviation of the current margins of `A` from the target.
    pub eps: f64,
    pub eps_max: f64,
    pub c_a: f64,
    /// `4 C_A ε`.
    pub bound: f64,
    /// `‖(α_A, β_A)‖∞` at the minimal-norm gauge.
    pub actual: f64,
    pub holds: bool,
    /// False when `ε ≥ ε_max`; the bound is then not guaranteed.
    pub within_eps_max: bool,
}

/// Compares the exact potentials scaling `A` to `margins` against `4 C_A ε`.
pub fn potential_stability_check(a: &DMatrix<f64>, margins: &MarginPair) -> Result<PotentialStabilityReport> {
    let c_a = stability_constant_ca(a, margins)?;
    let eps = margin_error(a, margins);
    let problem = ScalingProblem::new(a.clone(), margins.clone())?;
    let res = sinkhorn_scale(&problem, &SinkhornOptions::with_tol(1e-14))?;
    let (m, n) = a.shape();
    // inf_t ‖(α + t, β − t)‖∞ is the gauge distance to the zero potentials.
    let actual = gauge_distance(&res.potentials, &Potentials::zeros(m, n))?;
    let bound = 4.0 * c_a * eps;
    let em = eps_max(c_a);
    Ok(PotentialStabilityReport {
        eps,
        eps_max: em,
        c_a,
        bound,
        actual,
        holds: actual <= bound,
        within_eps_max: eps < em,
    })
}

/// A probability reference matrix with probability margins: one discrete
/// Schrödinger bridge problem.
#[derive(Clone, Debug)]
pub struct DiscreteSsb {
    pub reference: DMatrix<f64>,
    pub r: DVector<f64>,
    pub c: DVector<f64>,
}

impl DiscreteSsb {
    /// Normalizes all three inputs to unit mass.
    pub fn new(reference: DMatrix<f64>, r: DVector<f64>, c: DVector<f64>) -> Result<Self> {
        if reference.shape() != (r.len(), c.len()) {
            return Err(Error::DimensionMismatch("reference vs margins".into()));
        }
        let (sr, sc, sl) = (r.sum(), c.sum(), reference.sum());
        for s in [sr, sc, sl] {
            if !(s > 0.0) {
                return Err(Error::NonPositiveTotal(s));
            }
        }
        Ok(Self {
            reference: reference / sl,
            r: r / sr,
            c: c / sc,
        })
    }

    pub fn margins(&self) -> Result<MarginPair> {
        MarginPair::new(self.r.clone(), self.c.clone())
    }

    /// The bridge `π`, computed to margin tolerance `tol`.
    pub fn bridge(&self, tol: f64) -> Result<DMatrix<f64>> {
        let p = ScalingProblem::new(self.reference.clone(), self.margins()?)?;
        Ok(sinkhorn_scale(&p, &SinkhornOptions::with_tol(tol))?.rescaled)
    }

    /// Cost `κ(i,j) = −log(ℛ_ij / (r_i c_j))` relative to the product of the
    /// margins; zero on cells where the product vanishes.
    pub fn cost(&self) -> Result<DMatrix<f64>> {
        cost_matrix(&self.reference, &self.r, &self.c)
    }
}

pub fn cost_matrix(reference: &DMatrix<f64>, r: &DVector<f64>, c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(r.len(), c.len());
    for j in 0..c.len() {
        for i in 0..r.len() {
            let prod = r[i] * c[j];
            if prod == 0.0 {
                continue;
            }
            let l = reference[(i, j)];
            if l <= 0.0 {
                return Err(Error::UnboundedCost { i, j });
            }
            out[(i, j)] = -(l / prod).ln();
        }
    }
    Ok(out)
}

fn sup_positive_part(k: &DMatrix<f64>) -> f64 {
    k.iter().fold(0.0f64, |a, &v| a.max(v))
}

/// `exp(3/2 · ‖κ⁺‖∞ ∨ ‖κ′⁺‖∞) · d_H(ℛ, ℛ′)`: bound on `d_H(π, π′)` for a
/// change of reference at fixed margins.
pub fn kernel_stability_rhs(kappa: &DMatrix<f64>, kappa_prime: &DMatrix<f64>, dh_reference: f64) -> f64 {
    let k = sup_positive_part(kappa).max(sup_positive_part(kappa_prime));
    (1.5 * k).exp() * dh_reference
}

/// `4 (‖κ‖∞ ∨ ‖κ′‖∞)(‖ρ_r − ρ_r′‖₁ + ‖ρ_c − ρ_c′‖₁)`: bound on `d_H(π, π′)²`
/// for a change of margins at fixed reference.
pub fn margin_stability_rhs(kappa: &DMatrix<f64>, kappa_prime: &DMatrix<f64>, l1_r: f64, l1_c: f64) -> f64 {
    4.0 * kappa.amax().max(kappa_prime.amax()) * (l1_r + l1_c)
}

/// `8(‖κ‖∞ + M)(L¹ terms) + 4 e^{3(‖κ‖∞ + M) ∨ ‖κ′‖∞} d_H(ℛ, ℛ′)²`: bound on
/// `d_H(π, π′)²` when both reference and margins change.
pub fn total_stability_rhs(
    kappa: &DMatrix<f64>,
    kappa_prime: &DMatrix<f64>,
    m_ratio: f64,
    l1_r: f64,
    l1_c: f64,
    dh_reference: f64,
) -> f64 {
    let k = kappa.amax() + m_ratio;
    8.0 * k * (l1_r + l1_c) + 4.0 * (3.0 * k).max(kappa_prime.amax()).exp() * dh_reference * dh_reference
}

/// `M = max |log(r_i c_j / (r′_i c′_j))|`.
pub fn product_ratio_bound(a: &DiscreteSsb, b: &DiscreteSsb) -> f64 {
    let lr = a.r.iter().zip(b.r.iter()).map(|(x, y)| (x / y).ln());
    let lc: Vec<f64> = a.c.iter().zip(b.c.iter()).map(|(x, y)| (x / y).ln()).collect();
    lr.flat_map(|u| lc.iter().map(move |v| (u + v).abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl InequalityCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StabilityChecks {
    /// `d_H(π(ℛ; r, c), π(ℛ′; r, c))` against the kernel bound.
    pub kernel: InequalityCheck,
    /// `d_H(π(ℛ; r, c), π(ℛ; r′, c′))²` against the margin bound.
    pub margin: InequalityCheck,
    /// `d_H(π(ℛ; r, c), π(ℛ′; r′, c′))²` against the total bound.
    pub total: InequalityCheck,
}

/// Evaluates all three stability inequalities for the pair of problems
/// `(ℛ, r, c)` and `(ℛ′, r′, c′)`; the kernel check uses `(ℛ′, r, c)` and the
/// margin check `(ℛ, r′, c′)`.
pub fn stability_checks(a: &DiscreteSsb, b: &DiscreteSsb, tol: f64) -> Result<StabilityChecks> {
    let mixed_kernel = DiscreteSsb {
        reference: b.reference.clone(),
        r: a.r.clone(),
        c: a.c.clone(),
    };
    let mixed_margin = DiscreteSsb {
        reference: a.reference.clone(),
        r: b.r.clone(),
        c: b.c.clone(),
    };
    let pi = a.bridge(tol)?;
    let pi_k = mixed_kernel.bridge(tol)?;
    let pi_m = mixed_margin.bridge(tol)?;
    let pi_b = b.bridge(tol)?;
    let dh_ref = discrete_hellinger(&a.reference, &b.reference)?;
    let l1_r = (&a.r - &b.r).lp_norm(1);
    let l1_c = (&a.c - &b.c).lp_norm(1);

    let kappa = a.cost()?;
    let kernel = InequalityCheck::new(
        discrete_hellinger(&pi, &pi_k)?,
        kernel_stability_rhs(&kappa, &mixed_kernel.cost()?, dh_ref),
    );
    let margin = InequalityCheck::new(
        discrete_hellinger(&pi, &pi_m)?.powi(2),
        margin_stability_rhs(&kappa, &mixed_margin.cost()?, l1_r, l1_c),
    );
    let total = InequalityCheck::new(
        discrete_hellinger(&pi, &pi_b)?.powi(2),
        total_stability_rhs(&kappa, &b.cost()?, product_ratio_bound(a, b), l1_r, l1_c, dh_ref),
    );
    Ok(StabilityChecks { kernel, margin, total })
}

/// Limit margin densities and reference density on `[0,1]` and `[0,1]²`.
#[derive(Clone, Debug)]
pub struct LimitDensities {
    pub rho_r: GridDensity1D,
    pub rho_c: GridDensity1D,
    pub phi: GridDensity2D,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitBound {
    /// Uniform cost bound over the level-k problem and the limit.
    pub k_cost: f64,
    /// Smoothness common to the level-k margins and the limit densities.
    pub delta: f64,
    pub l1_r: f64,
    pub l1_c: f64,
    pub dh_reference: f64,
    pub rhs: f64,
}

/// `8(K + 4 log δ⁻¹)(‖ρ_{r_k} − ρ_r‖₁ + ‖ρ_{c_k} − ρ_c‖₁) + 4 e^{3K} δ^{−12} d_H(ℛ_k, ℛ)²`.
pub fn deterministic_limit_rhs_from(k_cost: f64, delta: f64, l1_r: f64, l1_c: f64, dh_reference: f64) -> f64 {
    8.0 * (k_cost - 4.0 * delta.ln()) * (l1_r + l1_c)
        + 4.0 * (3.0 * k_cost).exp() * delta.powi(-12) * dh_reference * dh_reference
}

/// Evaluates the deterministic scaling-limit bound for one level of a sequence.
pub fn deterministic_limit_rhs(problem_k: &ScalingProblem, limit: &LimitDensities) -> Result<LimitBound> {
    let mg = problem_k.margins();
    let total = mg.total();
    let rk = histogram_density_1d(mg.r(), total)?;
    let ck = histogram_density_1d(mg.c(), total)?;
    let phik = kernel_density_2d(problem_k.lambda(), problem_k.lambda().sum())?;

    let (rk_f, r_f) = refine_pair(&rk, &limit.rho_r);
    let (ck_f, c_f) = refine_pair(&ck, &limit.rho_c);
    let (phik_f, phi_f) = phik.common_refinement(&limit.phi);
    let l1_r = l1_density_distance(&rk_f, &r_f)?;
    let l1_c = l1_density_distance(&ck_f, &c_f)?;
    let dh_reference = hellinger(&phik_f, &phi_f)?;

    let k_cost = cost_bound_k(problem_k)?.max(limit_cost_bound(limit)?);
    let delta_lim = limit
        .rho_r
        .values
        .iter()
        .chain(limit.rho_c.values.iter())
        .fold(1.0f64, |d, &v| d.min(v).min(1.0 / v));
    let delta = delta_smoothness(mg)?.min(delta_lim);
    Ok(LimitBound {
        k_cost,
        delta,
        l1_r,
        l1_c,
        dh_reference,
        rhs: deterministic_limit_rhs_from(k_cost, delta, l1_r, l1_c, dh_reference),
    })
}

fn refine_pair(a: &GridDensity1D, b: &GridDensity1D) -> (GridDensity1D, GridDensity1D) {
    let (la, lb) = (a.values.len(), b.values.len());
    let l = (1..=la * lb).find(|k| k % la == 0 && k % lb == 0).unwrap_or(la * lb);
    (a.refine(l / la), b.refine(l / lb))
}

/// `max |log(φ / (ρ_r ⊗ ρ_c))|` over the limit densities.
fn limit_cost_bound(limit: &LimitDensities) -> Result<f64> {
    let phi = &limit.phi.values;
    let (m, n) = phi.shape();
    let mut k = 0.0f64;
    for j in 0..n {
        for i in 0..m {
            let x = (i as f64 + 0.5) / m as f64;
            let y = (j as f64 + 0.5) / n as f64;
            let prod = limit.rho_r.eval(x) * limit.rho_c.eval(y);
            let v = phi[(i, j)];
            if v <= 0.0 || prod <= 0.0 {
                return Err(Error::UnboundedCost { i, j });
            }
            k = k.max((v / prod).ln().abs());
        }
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScalabilityBound {
    /// `2^{m+n−2} p₀^{δ³(m∧n)/2}`.
    pub bound1: f64,
    /// `¼ exp(−η δ³ (m∧n)/2)`; meaningful only when `threshold_holds`.
    pub bound_exp: f64,
    /// Aspect ratio at least `γ` and `p₀ ≤ exp(−(2 log 2/δ³)(1 + 1/γ) − η)`.
    pub threshold_holds: bool,
}

pub fn scalability_probability_bound(margins: &MarginPair, p0: f64, gamma: f64, eta: f64) -> Result<ScalabilityBound> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in [0, 1], got {p0}")));
    }
    let delta = delta_smoothness(margins)?;
    let (m, n) = (margins.m(), margins.n());
    let (lo, hi) = (m.min(n) as f64, m.max(n) as f64);
    let d3 = delta.powi(3);
    let bound1 = if p0 == 0.0 {
        0.0
    } else {
        ((m + n - 2) as f64 * 2f64.ln() + d3 * lo / 2.0 * p0.ln()).exp()
    };
    let threshold = (-(2.0 * 2f64.ln() / d3) * (1.0 + 1.0 / gamma) - eta).exp();
    Ok(ScalabilityBound {
        bound1,
        bound_exp: 0.25 * (-eta * d3 * lo / 2.0).exp(),
        threshold_holds: gamma > 0.0 && lo / hi >= gamma && p0 <= threshold,
    })
}
