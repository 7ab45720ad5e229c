//! Sinkhorn matrix scaling in the potential (log) domain, gauge handling and
//! the Menon–Schneider scalability test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// Largest `m + n` accepted by the exhaustive scalability search.
pub const EXACT_SIZE_CAP: usize = 40;

const MARGIN_SUM_RTOL: f64 = 1e-9;

/// Target row sums `r`, column sums `c` and their common total `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginPair {
    r: DVector<f64>,
    c: DVector<f64>,
    total: f64,
}

impl MarginPair {
    pub fn new(r: DVector<f64>, c: DVector<f64>) -> Result<Self> {
        if r.is_empty() || c.is_empty() {
            return Err(Error::DimensionMismatch("margins must be non-empty".into()));
        }
        for (side, v) in [("row", &r), ("column", &c)] {
            if let Some((k, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::InvalidMargins(format!("{side} entry {k} is {x}")));
            }
        }
        let (sr, sc) = (r.sum(), c.sum());
        if (sr - sc).abs() > MARGIN_SUM_RTOL * sr.max(sc) {
            return Err(Error::InvalidMargins(format!(
                "row total {sr} differs from column total {sc}"
            )));
        }
        Ok(Self { r, c, total: sr })
    }

    pub fn uniform(m: usize, n: usize, total: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(m, total / m as f64),
            DVector::from_element(n, total / n as f64),
        )
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn m(&self) -> usize {
        self.r.len()
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn transpose(&self) -> Self {
        Self {
            r: self.c.clone(),
            c: self.r.clone(),
            total: self.total,
        }
    }

    pub fn require_positive(&self) -> Result<()> {
        for (side, v) in [("row", &self.r), ("column", &self.c)] {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| **x <= 0.0) {
                return Err(Error::NonPositiveMargin { side, index, value });
            }
        }
        Ok(())
    }
}

/// A nonnegative prior mean `Λ` together with the margins it should be scaled to.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingProblem {
    lambda: DMatrix<f64>,
    margins: MarginPair,
}

impl ScalingProblem {
    pub fn new(lambda: DMatrix<f64>, margins: MarginPair) -> Result<Self> {
        check_nonnegative(&lambda)?;
        if lambda.nrows() != margins.m() || lambda.ncols() != margins.n() {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{} but margins are {}x{}",
                lambda.nrows(),
                lambda.ncols(),
                margins.m(),
                margins.n()
            )));
        }
        Ok(Self { lambda, margins })
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn margins(&self) -> &MarginPair {
        &self.margins
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lambda.shape()
    }
}

pub(crate) fn check_nonnegative(a: &DMatrix<f64>) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let v = a[(i, j)];
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::NegativeEntry { i, j, value: v });
            }
        }
    }
    Ok(())
}

/// Normalization used to pick one representative of `(α − s, β + s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gauge {
    /// `Σ_j β(j) c(j) = 0`.
    #[default]
    BetaCWeighted,
    /// `max α = max β`.
    MaxEqualized,
    /// `Σ_i α(i) = Σ_j β(j)`, i.e. orthogonal to the direction `(1_m, −1_n)`.
    KernelOrthogonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub gauge: Gauge,
}

impl Potentials {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            alpha: DVector::zeros(m),
            beta: DVector::zeros(n),
            gauge: Gauge::default(),
        }
    }

    /// `(α − s, β + s)`; leaves `exp(α ⊕ β)` unchanged.
    pub fn shifted(&self, s: f64) -> Self {
        Self {
            alpha: self.alpha.add_scalar(-s),
            beta: self.beta.add_scalar(s),
            gauge: self.gauge,
        }
    }

    /// `exp(α(i) + β(j)) · Λ(i, j)`.
    pub fn apply(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(lambda.nrows(), lambda.ncols(), |i, j| {
            let v = lambda[(i, j)];
            if v == 0.0 {
                0.0
            } else {
                (self.alpha[i] + self.beta[j]).exp() * v
            }
        })
    }

    /// Sup norm of the concatenated vector `(α, β)`.
    pub fn sup_norm(&self) -> f64 {
        self.alpha.amax().max(self.beta.amax())
    }
}

#[derive(Clone, Debug)]
pub struct ScalingResult {
    pub potentials: Potentials,
    pub rescaled: DMatrix<f64>,
    pub iterations: usize,
    pub final_margin_error: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub gauge: Gauge,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            gauge: Gauge::default(),
        }
    }
}

impl SinkhornOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

pub fn sinkhorn_scale(problem: &ScalingProblem, opts: &SinkhornOptions) -> Result<ScalingResult> {
    sinkhorn_scale_observed(problem, opts, None, |_, _| {})
}

/// Sinkhorn started from the given potentials instead of zero.
pub fn sinkhorn_scale_warm(
    problem: &ScalingProblem,
    opts: &SinkhornOptions,
    init: &Potentials,
) -> Result<ScalingResult> {
    sinkhorn_scale_observed(problem, opts, Some(init), |_, _| {})
}

/// Full Sinkhorn driver. `observe` sees `(α, β)` after every complete sweep.
pub fn sinkhorn_scale_observed<F>(
    problem: &ScalingProblem,
    opts: &SinkhornOptions,
    init: Option<&Potentials>,
    mut observe: F,
) -> Result<ScalingResult>
where
    F: FnMut(&DVector<f64>, &DVector<f64>),
{
    let margins = problem.margins();
    margins.require_positive()?;
    let lam = problem.lambda();
    let (m, n) = lam.shape();
    for i in 0..m {
        if lam.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyLine { side: "row", index: i });
        }
    }
    for j in 0..n {
        if lam.column(j).iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyLine {
                side: "column",
                index: j,
            });
        }
    }

    let log_r = margins.r().map(f64::ln);
    let log_c = margins.c().map(f64::ln);
    let (mut alpha, mut beta) = match init {
        Some(p) => {
            if p.alpha.len() != m || p.beta.len() != n {
                return Err(Error::DimensionMismatch("initial potentials".into()));
            }
            (p.alpha.clone(), p.beta.clone())
        }
        None => (DVector::zeros(m), DVector::zeros(n)),
    };

    let mut lcol = log_col_sums(lam, &alpha);
    let lrow = log_row_sums(lam, &beta);
    let mut err = relative_error(&alpha, &lrow, &log_r).max(relative_error(&beta, &lcol, &log_c));
    let mut iterations = 0;
    while !(err <= opts.tol) {
        if iterations >= opts.max_iter {
            return Err(Error::MaxIterations {
                iterations,
                margin_error: err,
            });
        }
        beta = &log_c - &lcol;
        let lrow = log_row_sums(lam, &beta);
        alpha = &log_r - &lrow;
        iterations += 1;
        observe(&alpha, &beta);
        // Rows are exact after the α half-step; only columns can be off.
        lcol = log_col_sums(lam, &alpha);
        err = relative_error(&beta, &lcol, &log_c);
    }

    let raw = Potentials {
        alpha,
        beta,
        gauge: opts.gauge,
    };
    let potentials = gauge_fix(&raw, margins, opts.gauge);
    let rescaled = potentials.apply(lam);
    let final_margin_error = margin_error(&rescaled, margins);
    Ok(ScalingResult {
        potentials,
        rescaled,
        iterations,
        final_margin_error,
    })
}

/// `max |exp(p_k + ls_k − lt_k) − 1|`: relative deviation of a line sum from its target.
fn relative_error(p: &DVector<f64>, log_sums: &DVector<f64>, log_target: &DVector<f64>) -> f64 {
    p.iter()
        .zip(log_sums.iter())
        .zip(log_target.iter())
        .map(|((a, s), t)| (a + s - t).exp_m1().abs())
        .fold(0.0, f64::max)
}

/// `log Σ_i Λ_ij e^{α_i}` for every column. The exponentials are shifted by the
/// global maximum, which matches a per-column log-sum-exp unless the spread of
/// `α` exceeds the exponent range; those columns fall back to the exact form.
fn log_col_sums(lam: &DMatrix<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    let amax = alpha.max();
    let ea: Vec<f64> = alpha.iter().map(|a| (a - amax).exp()).collect();
    DVector::from_iterator(
        lam.ncols(),
        lam.column_iter().map(|col| {
            let s: f64 = col.iter().zip(&ea).map(|(l, e)| l * e).sum();
            if s > 0.0 && s.is_finite() {
                amax + s.ln()
            } else {
                log_sum_exp(
                    col.iter()
                        .zip(alpha.iter())
                        .filter(|(l, _)| **l > 0.0)
                        .map(|(l, a)| a + l.ln()),
                )
            }
        }),
    )
}

/// `log Σ_j Λ_ij e^{β_j}` for every row; same shifting as [`log_col_sums`].
fn log_row_sums(lam: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    let bmax = beta.max();
    let mut acc = vec![0.0; lam.nrows()];
    for (col, b) in lam.column_iter().zip(beta.iter()) {
        let e = (b - bmax).exp();
        for (a, l) in acc.iter_mut().zip(col.iter()) {
            *a += l * e;
        }
    }
    DVector::from_iterator(
        lam.nrows(),
        acc.iter().enumerate().map(|(i, &s)| {
            if s > 0.0 && s.is_finite() {
                bmax + s.ln()
            } else {
                log_sum_exp(
                    lam.row(i)
                        .iter()
                        .zip(beta.iter())
                        .filter(|(l, _)| **l > 0.0)
                        .map(|(l, b)| b + l.ln()),
                )
            }
        }),
    )
}

/// Log-sum-exp of finite values; `−∞` for an empty input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Max relative deviation of the row and column sums of `x` from `margins`.
pub fn margin_error(x: &DMatrix<f64>, margins: &MarginPair) -> f64 {
    let rows = x.column_sum();
    let cols = x.row_sum();
    let rel = |s: f64, t: f64| if t > 0.0 { (s - t).abs() / t } else { s.abs() };
    let er = rows.iter().zip(margins.r().iter()).map(|(&s, &t)| rel(s, t));
    let ec = cols.iter().zip(margins.c().iter()).map(|(&s, &t)| rel(s, t));
    er.chain(ec).fold(0.0, f64::max)
}

pub fn gauge_fix(pot: &Potentials, margins: &MarginPair, gauge: Gauge) -> Potentials {
    let s = match gauge {
        Gauge::BetaCWeighted => -pot.beta.dot(margins.c()) / margins.total(),
        Gauge::MaxEqualized => (pot.alpha.max() - pot.beta.max()) / 2.0,
        Gauge::KernelOrthogonal => (pot.alpha.sum() - pot.beta.sum()) / (pot.alpha.len() + pot.beta.len()) as f64,
    };
    let mut out = pot.shifted(s);
    out.gauge = gauge;
    out
}

/// `inf_t max(‖α₁ − α₂ + t‖∞, ‖β₁ − β₂ − t‖∞)`, with the minimizing `t`.
///
/// With `A, a` the max/min of `δα` and `B, b` those of `δβ`, the objective is
/// `max(A + t, t − b, B − t, −a − t)`; the increasing and decreasing envelopes
/// cross at the minimum.
pub fn gauge_distance_with_shift(p1: &Potentials, p2: &Potentials) -> Result<(f64, f64)> {
    if p1.alpha.len() != p2.alpha.len() || p1.beta.len() != p2.beta.len() {
        return Err(Error::DimensionMismatch("potential lengths differ".into()));
    }
    let da = &p1.alpha - &p2.alpha;
    let db = &p1.beta - &p2.beta;
    let up = da.max().max(-db.min());
    let down = db.max().max(-da.min());
    Ok(((up + down) / 2.0, (down - up) / 2.0))
}

pub fn gauge_distance(p1: &Potentials, p2: &Potentials) -> Result<f64> {
    gauge_distance_with_shift(p1, p2).map(|(d, _)| d)
}

/// `⟨α, r⟩ + ⟨β, c⟩ − ⟨exp(α ⊕ β), Λ⟩`.
pub fn dual_objective(problem: &ScalingProblem, pot: &Potentials) -> Result<f64> {
    let (m, n) = problem.shape();
    if pot.alpha.len() != m || pot.beta.len() != n {
        return Err(Error::DimensionMismatch("potentials vs problem".into()));
    }
    let mg = problem.margins();
    let mass = pot.apply(problem.lambda()).sum();
    Ok(pot.alpha.dot(mg.r()) + pot.beta.dot(mg.c()) - mass)
}

/// `Σ Z log(Z/Λ)` with `0 log 0 = 0`; `+∞` when `Z` is not dominated by `Λ`.
pub fn kl_to_reference(z: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<f64> {
    if z.shape() != lambda.shape() {
        return Err(Error::DimensionMismatch("kl operands".into()));
    }
    let mut acc = 0.0;
    for (&zv, &lv) in z.iter().zip(lambda.iter()) {
        if zv > 0.0 {
            if lv <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc += zv * (zv / lv).ln();
        }
    }
    Ok(acc)
}

/// Two-sided bound on `α(i) + β(j)` in terms of the normalized cost
/// `κ̄(i,j) = log(r̄_i c̄_j / Λ̄_ij)` (with `0/0 = 1`).
pub fn potential_bounds(problem: &ScalingProblem) -> Result<(f64, f64)> {
    let lam = problem.lambda();
    let mg = problem.margins();
    let total = mg.total();
    let l1 = lam.sum();
    if !(l1 > 0.0) {
        return Err(Error::NonPositiveTotal(l1));
    }
    let (mut kp, mut km) = (0.0f64, 0.0f64);
    for j in 0..lam.ncols() {
        for i in 0..lam.nrows() {
            let prod = mg.r()[i] * mg.c()[j];
            let l = lam[(i, j)];
            if (l == 0.0) != (prod == 0.0) {
                return Err(Error::ZeroPatternMismatch { i, j });
            }
            if l > 0.0 {
                let k = (prod / (total * total) / (l / l1)).ln();
                kp = kp.max(k);
                km = km.max(-k);
            }
        }
    }
    let shift = (total / l1).ln();
    Ok((-2.0 * (km + kp) + shift, 2.0 * kp + shift))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Scalability {
    Scalable,
    /// `rows` is `I`, `cols` is `J` (0-based) with `Λ_{I^c, J} = O` and the
    /// mass condition violated.
    NotScalable {
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScalabilityMode {
    /// Exhaustive subset search; errors beyond [`EXACT_SIZE_CAP`].
    Exact,
    /// Strictly positive matrices are scalable; anything else goes to `Exact`.
    #[default]
    Auto,
}

pub fn check_scalability(a: &DMatrix<f64>, margins: &MarginPair, mode: ScalabilityMode) -> Result<Scalability> {
    check_nonnegative(a)?;
    margins.require_positive()?;
    let (m, n) = a.shape();
    if m != margins.m() || n != margins.n() {
        return Err(Error::DimensionMismatch("matrix vs margins".into()));
    }
    if mode == ScalabilityMode::Auto && a.iter().all(|&v| v > 0.0) {
        return Ok(Scalability::Scalable);
    }
    if m + n > EXACT_SIZE_CAP {
        return Err(Error::TooLargeForExact {
            size: m + n,
            cap: EXACT_SIZE_CAP,
        });
    }
    if m <= n {
        Ok(exact_scalability(a, margins.r(), margins.c()))
    } else {
        // A is scalable to (r, c) iff Aᵀ is scalable to (c, r); a witness
        // (I', J') for the transpose maps back to (J'^c, I'^c).
        Ok(match exact_scalability(&a.transpose(), margins.c(), margins.r()) {
            Scalability::Scalable => Scalability::Scalable,
            Scalability::NotScalable { rows, cols } => Scalability::NotScalable {
                rows: complement(&cols, m),
                cols: complement(&rows, n),
            },
        })
    }
}

fn complement(set: &[usize], len: usize) -> Vec<usize> {
    (0..len).filter(|k| !set.contains(k)).collect()
}

/// Enumerates row subsets `I`. For fixed `I` the admissible `J` are the subsets
/// of `Z(I) = {j : Λ_{I^c, j} = 0}`, and the binding ones are `J = Z(I)` and,
/// when every nonzero of the rows `I` lies in `Z(I)`, `J = W(I)`, the columns
/// touched by `I`.
fn exact_scalability(a: &DMatrix<f64>, r: &DVector<f64>, c: &DVector<f64>) -> Scalability {
    let (m, n) = a.shape();
    debug_assert!(m < 64 && n < 64);
    let total = r.sum();
    let tol = 1e-12 * total;
    let col_support: Vec<u64> = (0..n)
        .map(|j| (0..m).filter(|&i| a[(i, j)] != 0.0).fold(0u64, |s, i| s | (1 << i)))
        .collect();
    let full_rows = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
    let bits = |mask: u64, len: usize| (0..len).filter(|k| mask >> k & 1 == 1).collect::<Vec<_>>();
    let csum = |mask: u64| (0..n).filter(|k| mask >> k & 1 == 1).map(|k| c[k]).sum::<f64>();

    for rows in 0..=full_rows {
        let out = full_rows & !rows;
        let mut z = 0u64;
        let mut w = 0u64;
        for (j, &sup) in col_support.iter().enumerate() {
            if sup & out == 0 {
                z |= 1 << j;
            }
            if sup & rows != 0 {
                w |= 1 << j;
            }
        }
        let r_i: f64 = (0..m).filter(|k| rows >> k & 1 == 1).map(|k| r[k]).sum();
        let c_z = csum(z);
        let w_in_z = w & !z == 0;
        let equal_z = (r_i - c_z).abs() <= tol;
        if r_i < c_z - tol || (equal_z && !w_in_z) {
            return Scalability::NotScalable {
                rows: bits(rows, m),
                cols: bits(z, n),
            };
        }
        if w_in_z && (r_i - csum(w)).abs() > tol {
            return Scalability::NotScalable {
                rows: bits(rows, m),
                cols: bits(w, n),
            };
        }
    }
    Scalability::Scalable
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn uniform2() -> MarginPair {
        MarginPair::new(dvector![0.5, 0.5], dvector![0.5, 0.5]).unwrap()
    }

    #[test]
    fn margin_pair_rejects_mismatched_totals() {
        assert!(MarginPair::new(dvector![1.0, 1.0], dvector![1.0]).is_err());
        assert!(MarginPair::new(dvector![-1.0, 2.0], dvector![1.0]).is_err());
    }

    #[test]
    fn fixed_point_needs_no_sweep() {
        let lam = dmatrix![0.1, 0.2; 0.3, 0.4];
        let mg = MarginPair::new(dvector![0.3, 0.7], dvector![0.4, 0.6]).unwrap();
        let res = sinkhorn_scale(&ScalingProblem::new(lam.clone(), mg).unwrap(), &Default::default()).unwrap();
        assert!(res.iterations <= 1);
        assert!(res.potentials.alpha.amax() < 1e-12 && res.potentials.beta.amax() < 1e-12);
        assert!((res.rescaled - lam).amax() < 1e-15);
    }

    #[test]
    fn nutz_counterexample_does_not_converge() {
        let p = ScalingProblem::new(dmatrix![1.0, 1.0; 0.0, 1.0], uniform2()).unwrap();
        let opts = SinkhornOptions {
            max_iter: 2000,
            ..Default::default()
        };
        assert!(matches!(sinkhorn_scale(&p, &opts), Err(Error::MaxIterations { .. })));
    }

    #[test]
    fn empty_line_and_nonpositive_margin() {
        let p = ScalingProblem::new(dmatrix![1.0, 1.0; 0.0, 0.0], uniform2()).unwrap();
        assert!(matches!(
            sinkhorn_scale(&p, &Default::default()),
            Err(Error::EmptyLine { side: "row", index: 1 })
        ));
        let mg = MarginPair::new(dvector![1.0, 0.0], dvector![0.5, 0.5]).unwrap();
        let p = ScalingProblem::new(dmatrix![1.0, 1.0; 1.0, 1.0], mg).unwrap();
        assert!(matches!(
            sinkhorn_scale(&p, &Default::default()),
            Err(Error::NonPositiveMargin { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            ScalingProblem::new(DMatrix::from_element(3, 2, 1.0), uniform2()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn extreme_spread_uses_exact_fallback() {
        // Entries spanning ~600 orders of magnitude force potentials whose
        // exponentials underflow after the global shift.
        let lam = dmatrix![1e-300, 1.0; 1.0, 1e300];
        let mg = MarginPair::new(dvector![1.0, 1.0], dvector![1.0, 1.0]).unwrap();
        let res = sinkhorn_scale(&ScalingProblem::new(lam, mg.clone()).unwrap(), &Default::default()).unwrap();
        assert!(res.final_margin_error < 1e-9);
    }

    #[test]
    fn gauges() {
        let mg = MarginPair::new(dvector![1.0, 2.0, 3.0], dvector![4.0, 2.0]).unwrap();
        let p = Potentials {
            alpha: dvector![0.3, -1.0, 2.0],
            beta: dvector![0.7, -0.2],
            gauge: Gauge::MaxEqualized,
        };
        let b = gauge_fix(&p, &mg, Gauge::BetaCWeighted);
        assert!(b.beta.dot(mg.c()).abs() < 1e-12);
        let mx = gauge_fix(&p, &mg, Gauge::MaxEqualized);
        assert!((mx.alpha.max().exp() / mx.beta.max().exp() - 1.0).abs() < 1e-12);
        let k = gauge_fix(&p, &mg, Gauge::KernelOrthogonal);
        assert!((k.alpha.sum() - k.beta.sum()).abs() < 1e-12);
        // Re-fixing is idempotent and undoes any shift.
        let again = gauge_fix(&b.shifted(0.37), &mg, Gauge::BetaCWeighted);
        assert!((&again.alpha - &b.alpha).amax() < 1e-12 && (&again.beta - &b.beta).amax() < 1e-12);
    }

    fn grid_gauge_distance(p1: &Potentials, p2: &Potentials) -> f64 {
        let da = &p1.alpha - &p2.alpha;
        let db = &p1.beta - &p2.beta;
        (-400_000..=400_000)
            .map(|k| {
                let t = k as f64 * 1e-5;
                da.add_scalar(t).amax().max(db.add_scalar(-t).amax())
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn gauge_distance_matches_grid_search() {
        let p1 = Potentials {
            alpha: dvector![-1.0, 0.25, 1.0],
            beta: dvector![0.0, 0.0],
            gauge: Gauge::BetaCWeighted,
        };
        let p0 = Potentials::zeros(3, 2);
        let d = gauge_distance(&p1, &p0).unwrap();
        assert!((d - grid_gauge_distance(&p1, &p0)).abs() < 2e-5);
        assert!((d - 1.0).abs() < 1e-12);
        let p2 = Potentials {
            alpha: dvector![0.5, 3.0, -1.2],
            beta: dvector![2.0, -0.4],
            gauge: Gauge::BetaCWeighted,
        };
        let d = gauge_distance(&p2, &p0).unwrap();
        assert!((d - grid_gauge_distance(&p2, &p0)).abs() < 2e-5);
        assert_eq!(gauge_distance(&p2, &p2.shifted(-0.8)).unwrap().abs() < 1e-12, true);
    }

    #[test]
    fn kl_conventions() {
        let lam = dmatrix![1.0, 0.0; 2.0, 3.0];
        assert_eq!(kl_to_reference(&lam, &lam).unwrap(), 0.0);
        assert_eq!(
            kl_to_reference(&dmatrix![0.0, 1.0; 0.0, 0.0], &lam).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn nutz_witness() {
        let v = check_scalability(&dmatrix![1.0, 1.0; 0.0, 1.0], &uniform2(), ScalabilityMode::Exact).unwrap();
        assert_eq!(
            v,
            Scalability::NotScalable {
                rows: vec![0],
                cols: vec![0]
            }
        );
        let v = check_scalability(&dmatrix![1.0, 0.0; 0.0, 1.0], &uniform2(), ScalabilityMode::Exact).unwrap();
        assert_eq!(v, Scalability::Scalable);
    }

    #[test]
    fn transposed_witness_is_valid() {
        // 3x2 with a zero block; the search runs on the transpose.
        let a = dmatrix![1.0, 0.0; 1.0, 0.0; 1.0, 1.0];
        let mg = MarginPair::new(dvector![1.0, 1.0, 1.0], dvector![1.0, 2.0]).unwrap();
        match check_scalability(&a, &mg, ScalabilityMode::Exact).unwrap() {
            Scalability::NotScalable { rows, cols } => {
                for i in complement(&rows, 3) {
                    for &j in &cols {
                        assert_eq!(a[(i, j)], 0.0);
                    }
                }
                let ri: f64 = rows.iter().map(|&i| mg.r()[i]).sum();
                let cj: f64 = cols.iter().map(|&j| mg.c()[j]).sum();
                let block_zero = rows
                    .iter()
                    .all(|&i| complement(&cols, 2).iter().all(|&j| a[(i, j)] == 0.0));
                assert!(ri < cj || (ri == cj) != block_zero);
            }
            Scalability::Scalable => panic!("column 2 needs mass 2 but only row 3 feeds it"),
        }
    }

    #[test]
    fn exact_mode_size_cap() {
        let a = DMatrix::from_element(21, 20, 1.0);
        let mg = MarginPair::uniform(21, 20, 1.0).unwrap();
        assert!(matches!(
            check_scalability(&a, &mg, ScalabilityMode::Exact),
            Err(Error::TooLargeForExact { .. })
        ));
        assert_eq!(
            check_scalability(&a, &mg, ScalabilityMode::Auto).unwrap(),
            Scalability::Scalable
        );
    }

    #[test]
    fn potential_bounds_rank_one_collapse() {
        let r = dvector![1.0, 2.0];
        let c = dvector![0.5, 1.5, 1.0];
        let lam = &r * c.transpose() * 0.7;
        let p = ScalingProblem::new(lam.clone(), MarginPair::new(r, c).unwrap()).unwrap();
        let (lo, hi) = potential_bounds(&p).unwrap();
        let expect = (3.0 / lam.sum()).ln();
        assert!((lo - expect).abs() < 1e-12 && (hi - expect).abs() < 1e-12);
        let bad = ScalingProblem::new(dmatrix![0.0, 1.0; 1.0, 1.0], uniform2()).unwrap();
        assert!(matches!(
            potential_bounds(&bad),
            Err(Error::ZeroPatternMismatch { i: 0, j: 0 })
        ));
    }

    #[test]
    fn homogeneous_potentials_closed_form() {
        let (n, a, lam) = (6, 2.5, 0.4);
        let p = ScalingProblem::new(
            DMatrix::from_element(n, n, lam),
            MarginPair::uniform(n, n, a * n as f64).unwrap(),
        )
        .unwrap();
        let res = sinkhorn_scale(&p, &Default::default()).unwrap();
        let want = (a / (n as f64 * lam)).ln();
        let (lo, hi) = potential_bounds(&p).unwrap();
        for i in 0..n {
            for j in 0..n {
                let s = res.potentials.alpha[i] + res.potentials.beta[j];
                assert!((s - want).abs() < 1e-10);
                assert!(lo - 1e-12 <= s && s <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn dual_objective_values() {
        let lam = dmatrix![0.5, 1.0; 1.5, 1.0];
        let mg = MarginPair::new(dvector![2.0, 2.0], dvector![1.0, 3.0]).unwrap();
        let p = ScalingProblem::new(lam.clone(), mg.clone()).unwrap();
        let zero = dual_objective(&p, &Potentials::zeros(2, 2)).unwrap();
        assert!((zero + 4.0).abs() < 1e-14);

        // Rank-one Λ = a bᵀ: exp(α_i + β_j) = r_i c_j / (N a_i b_j), so the
        // optimum is Σ r log(r/a) + Σ c log(c/(N b)) − N.
        let (a, b) = (dvector![0.3, 1.7], dvector![2.0, 0.5]);
        let p = ScalingProblem::new(&a * b.transpose(), mg.clone()).unwrap();
        let res = sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-13)).unwrap();
        let expect: f64 = (0..2).map(|i| mg.r()[i] * (mg.r()[i] / a[i]).ln()).sum::<f64>()
            + (0..2).map(|j| mg.c()[j] * (mg.c()[j] / (4.0 * b[j])).ln()).sum::<f64>()
            - 4.0;
        assert!((dual_objective(&p, &res.potentials).unwrap() - expect).abs() < 1e-10);
    }

    fn positive_matrix(m: usize, n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(0.05f64..3.0, m * n).prop_map(move |v| DMatrix::from_vec(m, n, v))
    }

    fn margins(m: usize, n: usize) -> impl Strategy<Value = MarginPair> {
        (
            prop::collection::vec(0.1f64..2.0, m),
            prop::collection::vec(0.1f64..2.0, n),
        )
            .prop_map(|(r, c)| {
                let r = DVector::from_vec(r);
                let mut c = DVector::from_vec(c);
                c *= r.sum() / c.sum();
                MarginPair::new(r, c).unwrap()
            })
    }

    fn instance() -> impl Strategy<Value = ScalingProblem> {
        (1usize..7, 1usize..7).prop_flat_map(|(m, n)| {
            (positive_matrix(m, n), margins(m, n)).prop_map(|(l, mg)| ScalingProblem::new(l, mg).unwrap())
        })
    }

    /// `a = √(s+γ)/(√(½−s−γ)+√(s+γ))` solves `(a/(1−a))² = ℛ₁₁ℛ₂₂/(ℛ₁₂ℛ₂₁)`: it is the
    /// diagonal for unit margins, and probability margins `(½, ½)` halve it.
    #[test]
    fn two_by_two_closed_form() {
        for s in [0.2f64, 0.1, 0.05] {
            let g = s * s;
            let a = (s + g).sqrt() / ((0.5 - s - g).sqrt() + (s + g).sqrt());
            let lam = dmatrix![0.25, 0.5 - (s + g); 0.25, s + g];
            let solve = |total: f64| {
                let p = ScalingProblem::new(lam.clone(), MarginPair::uniform(2, 2, total).unwrap()).unwrap();
                sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-14)).unwrap().rescaled
            };
            assert!((solve(2.0) - dmatrix![a, 1.0 - a; 1.0 - a, a]).amax() < 1e-12);
            let h = a / 2.0;
            assert!((solve(1.0) - dmatrix![h, 0.5 - h; 0.5 - h, h]).amax() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn margins_are_met(p in instance()) {
            let res = sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-11)).unwrap();
            prop_assert!(margin_error(&res.rescaled, p.margins()) <= 1e-10);
            prop_assert!(res.final_margin_error <= 1e-10);
        }

        #[test]
        fn rescaled_matches_potentials(p in instance()) {
            let res = sinkhorn_scale(&p, &Default::default()).unwrap();
            let lam = p.lambda();
            for j in 0..lam.ncols() {
                for i in 0..lam.nrows() {
                    let want = (res.potentials.alpha[i] + res.potentials.beta[j]).exp() * lam[(i, j)];
                    prop_assert!((res.rescaled[(i, j)] - want).abs() <= 1e-12 * want);
                }
            }
        }

        #[test]
        fn gauge_choice_does_not_change_the_bridge(p in instance()) {
            let base = sinkhorn_scale(&p, &Default::default()).unwrap();
            for gauge in [Gauge::MaxEqualized, Gauge::KernelOrthogonal] {
                let other = gauge_fix(&base.potentials, p.margins(), gauge);
                let x = other.apply(p.lambda());
                prop_assert!((&x - &base.rescaled).iter().zip(base.rescaled.iter()).all(|(d, v)| d.abs() <= 1e-12 * v));
            }
        }

        #[test]
        fn dual_is_monotone_along_iterations(p in instance()) {
            let mut values = vec![dual_objective(&p, &Potentials::zeros(p.shape().0, p.shape().1)).unwrap()];
            sinkhorn_scale_observed(&p, &Default::default(), None, |a, b| {
                let pot = Potentials { alpha: a.clone(), beta: b.clone(), gauge: Gauge::BetaCWeighted };
                values.push(dual_objective(&p, &pot).unwrap());
            }).unwrap();
            for w in values.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
            }
        }

        #[test]
        fn entropy_is_minimal_over_the_polytope(p in instance(), q in (0u64..1000)) {
            // Another point of T(r, c): scale a different positive matrix.
            let (m, n) = p.shape();
            let other = DMatrix::from_fn(m, n, |i, j| 0.1 + ((i * 7 + j * 13) as u64 + q) as f64 % 5.0);
            let z = sinkhorn_scale(&ScalingProblem::new(other, p.margins().clone()).unwrap(), &SinkhornOptions::with_tol(1e-12)).unwrap().rescaled;
            let x = sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-12)).unwrap().rescaled;
            prop_assert!(kl_to_reference(&x, p.lambda()).unwrap() <= kl_to_reference(&z, p.lambda()).unwrap() + 1e-8);
        }

        #[test]
        fn converged_potentials_maximize_dual(p in instance(), i in 0usize..6, sign in prop::bool::ANY) {
            let res = sinkhorn_scale(&p, &SinkhornOptions::with_tol(1e-12)).unwrap();
            let best = dual_objective(&p, &res.potentials).unwrap();
            let mut pert = res.potentials.clone();
            let k = i % pert.alpha.len();
            pert.alpha[k] += if sign { 0.1 } else { -0.1 };
            prop_assert!(best > dual_objective(&p, &pert).unwrap());
        }

        #[test]
        fn potential_bounds_contain_solution(p in instance()) {
            let res = sinkhorn_scale(&p, &Default::default()).unwrap();
            let (lo, hi) = potential_bounds(&p).unwrap();
            let pot = &res.potentials;
            for a in pot.alpha.iter() {
                for b in pot.beta.iter() {
                    prop_assert!(lo - 1e-9 <= a + b && a + b <= hi + 1e-9);
                }
            }
        }

        #[test]
        fn gauge_distance_invariant_under_shift(p in instance(), s in -5.0f64..5.0) {
            let res = sinkhorn_scale(&p, &Default::default()).unwrap();
            prop_assert!(gauge_distance(&res.potentials, &res.potentials.shifted(s)).unwrap() < 1e-12);
        }
    }
}
