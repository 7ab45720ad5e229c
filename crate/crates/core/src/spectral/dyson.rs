use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use super::VarianceProfile;
use crate::error::{Error, Result};

pub const DEFAULT_ETA_LADDER: [f64; 9] = [1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 3e-4, 1e-4];
const DAMPING: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct DysonOptions {
    pub grid: DVector<f64>,
    pub eta_ladder: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl DysonOptions {
    /// `points` uniform energies `hi·k/points`, `k = 1..=points`.
    pub fn uniform_grid(points: usize, hi: f64) -> DVector<f64> {
        DVector::from_fn(points, |k, _| hi * (k + 1) as f64 / points as f64)
    }
}

impl Default for DysonOptions {
    fn default() -> Self {
        Self {
            grid: Self::uniform_grid(400, 4.2),
            eta_ladder: DEFAULT_ETA_LADDER.to_vec(),
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DysonSolution {
    pub grid: DVector<f64>,
    /// Absolutely continuous part `π(τ)` with the atom removed.
    pub density: DVector<f64>,
    pub atom: f64,
    /// `m̄(τ + iη_final)`.
    pub stieltjes: Vec<Complex64>,
    pub eta_final: f64,
    pub converged: bool,
}

impl DysonSolution {
    /// `ν([0, τ_k])` at every grid point. The first cell assumes the `τ^{-1/2}`
    /// growth of a hard edge at 0, which integrates to `2 τ₁ π(τ₁)`; the rest is
    /// the trapezoid rule.
    pub fn cdf(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.len());
        let mut acc = self.atom;
        for k in 0..self.grid.len() {
            if k == 0 {
                acc += 2.0 * self.grid[0] * self.density[0];
            } else {
                acc += 0.5 * (self.density[k] + self.density[k - 1]) * (self.grid[k] - self.grid[k - 1]);
            }
            out.push(acc);
        }
        out
    }

    /// `atom + ∫ π` over the grid.
    pub fn mass(&self) -> f64 {
        self.cdf().last().copied().unwrap_or(self.atom)
    }

    /// `ν([0, τ])`, interpolated linearly between grid points.
    pub fn cdf_at(&self, tau: f64) -> f64 {
        let cdf = self.cdf();
        let g = &self.grid;
        if tau <= 0.0 {
            return if tau == 0.0 { self.atom } else { 0.0 };
        }
        if tau < g[0] {
            return self.atom + 2.0 * self.density[0] * (g[0] * tau).sqrt();
        }
        match g.iter().position(|&x| x >= tau) {
            None => *cdf.last().unwrap(),
            Some(0) => cdf[0],
            Some(k) => {
                let w = (tau - g[k - 1]) / (g[k] - g[k - 1]);
                cdf[k - 1] + w * (cdf[k] - cdf[k - 1])
            }
        }
    }

    /// [`cdf_at`](Self::cdf_at) with the continuous part rescaled to mass
    /// `1 − atom`, absorbing the quadrature and broadening loss.
    pub fn normalized_cdf_at(&self, tau: f64) -> f64 {
        let cont = self.mass() - self.atom;
        if tau < 0.0 {
            return 0.0;
        }
        if !(cont > 0.0) {
            return 1.0;
        }
        (self.atom + (self.cdf_at(tau) - self.atom) * (1.0 - self.atom) / cont).min(1.0)
    }

    pub fn density_at(&self, tau: f64) -> f64 {
        let g = &self.grid;
        if tau <= 0.0 || tau > g[g.len() - 1] {
            return 0.0;
        }
        match g.iter().position(|&x| x >= tau) {
            Some(0) | None => self.density[0],
            Some(k) => {
                let w = (tau - g[k - 1]) / (g[k] - g[k - 1]);
                self.density[k - 1] + w * (self.density[k] - self.density[k - 1])
            }
        }
    }
}

/// The Dyson system with identical rows and identical columns of `S` merged:
/// `u_b = 1 + Σ_a p_a T_ab m_a`, `m_a = −1/(z − Σ_b q_b T_ab / u_b)`.
struct Reduced {
    t: DMatrix<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    row_class: Vec<usize>,
    m: usize,
}

fn class_key(v: impl Iterator<Item = f64>, unit: f64) -> Vec<i64> {
    v.map(|x| (x / unit * 1e9).round() as i64).collect()
}

impl Reduced {
    fn new(s: &DMatrix<f64>) -> Self {
        let (m, n) = s.shape();
        let unit = s.amax().max(f64::MIN_POSITIVE);

        let mut col_classes: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut col_rep = Vec::new();
        let mut q = Vec::new();
        for j in 0..n {
            let key = class_key(s.column(j).iter().copied(), unit);
            let next = col_rep.len();
            let b = *col_classes.entry(key).or_insert(next);
            if b == next {
                col_rep.push(j);
                q.push(0.0);
            }
            q[b] += 1.0;
        }

        let mut row_classes: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut row_rep = Vec::new();
        let mut p = Vec::new();
        let mut row_class = Vec::with_capacity(m);
        for i in 0..m {
            let key = class_key(col_rep.iter().map(|&j| s[(i, j)]), unit);
            let next = row_rep.len();
            let a = *row_classes.entry(key).or_insert(next);
            if a == next {
                row_rep.push(i);
                p.push(0.0);
            }
            p[a] += 1.0;
            row_class.push(a);
        }

        let t = DMatrix::from_fn(row_rep.len(), col_rep.len(), |a, b| s[(row_rep[a], col_rep[b])]);
        Self { t, p, q, row_class, m }
    }

    fn classes(&self) -> usize {
        self.p.len()
    }

    fn initial(&self, z: Complex64) -> Vec<Complex64> {
        vec![-1.0 / z; self.classes()]
    }

    fn average(&self, ms: &[Complex64]) -> Complex64 {
        ms.iter().zip(&self.p).map(|(v, p)| v * p).sum::<Complex64>() / self.m as f64
    }

    fn step(&self, z: Complex64, ms: &[Complex64], out: &mut [Complex64]) {
        let (na, nb) = self.t.shape();
        let mut inv_u = vec![Complex64::new(0.0, 0.0); nb];
        for b in 0..nb {
            let mut u = Complex64::new(1.0, 0.0);
            for a in 0..na {
                u += self.p[a] * self.t[(a, b)] * ms[a];
            }
            inv_u[b] = self.q[b] / u;
        }
        for a in 0..na {
            let mut w = Complex64::new(0.0, 0.0);
            for b in 0..nb {
                w += self.t[(a, b)] * inv_u[b];
            }
            out[a] = -1.0 / (z - w);
        }
    }

    /// Damped fixed-point iteration from `init` at `z`.
    fn solve(&self, z: Complex64, init: Vec<Complex64>, tol: f64, max_iter: usize) -> PointOutcome {
        let mut ms = init;
        let mut next = ms.clone();
        for _ in 0..max_iter {
            self.step(z, &ms, &mut next);
            let scale = ms.iter().map(|v| v.norm()).fold(1.0, f64::max);
            let mut diff = 0.0f64;
            for (m, nv) in ms.iter_mut().zip(&next) {
                diff = diff.max((nv - *m).norm());
                *m = (1.0 - DAMPING) * *m + DAMPING * nv;
            }
            if ms.iter().any(|v| !(v.im > 0.0) || !v.re.is_finite()) {
                return PointOutcome::LeftHalfPlane;
            }
            if diff <= tol * scale {
                return PointOutcome::Converged(ms);
            }
        }
        PointOutcome::Stalled(ms)
    }
}

enum PointOutcome {
    Converged(Vec<Complex64>),
    Stalled(Vec<Complex64>),
    LeftHalfPlane,
}

fn density_from(mbar: Complex64, tau: f64, eta: f64, atom: f64) -> f64 {
    let atom_part = atom * eta / (tau * tau + eta * eta);
    ((mbar.im - atom_part) / std::f64::consts::PI).max(0.0)
}

fn validate(opts: &DysonOptions) -> Result<()> {
    if opts.grid.is_empty() || opts.grid.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument("energy grid must be positive and finite".into()));
    }
    if opts.grid.as_slice().windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("energy grid must be increasing".into()));
    }
    let ladder = &opts.eta_ladder;
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] >= w[0]) || ladder.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::InvalidArgument(
            "η ladder must be positive and decreasing".into(),
        ));
    }
    if *ladder.last().unwrap() < 1e-5 {
        return Err(Error::InvalidArgument("final η must be at least 1e-5".into()));
    }
    Ok(())
}

/// Limiting eigenvalue law of `Ǎ Ǎᵀ` on `opts.grid`, by Stieltjes inversion at
/// the last rung of the η ladder. Grid points are solved in parallel; each rung
/// is warm-started from the previous one.
pub fn solve_dyson(profile: &VarianceProfile, opts: &DysonOptions) -> Result<DysonSolution> {
    validate(opts)?;
    let red = Reduced::new(&profile.s);
    let atom = profile.atom();
    let grid = opts.grid.clone();
    let eta0 = opts.eta_ladder[0];
    let mut state: Vec<Vec<Complex64>> = grid.iter().map(|&t| red.initial(Complex64::new(t, eta0))).collect();

    for &eta in &opts.eta_ladder {
        let outcomes: Vec<PointOutcome> = grid
            .as_slice()
            .par_iter()
            .zip(state.par_iter())
            .map(|(&tau, init)| red.solve(Complex64::new(tau, eta), init.clone(), opts.tol, opts.max_iter))
            .collect();
        let mut first_stall = None;
        for (k, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                PointOutcome::Converged(ms) => state[k] = ms,
                PointOutcome::Stalled(ms) => {
                    first_stall.get_or_insert(k);
                    state[k] = ms;
                }
                PointOutcome::LeftHalfPlane => return Err(Error::LeftHalfPlane { tau: grid[k], eta }),
            }
        }
        if let Some(k) = first_stall {
            let partial = assemble(&red, &grid, &state, eta, atom, false);
            return Err(Error::NoConvergence {
                tau: grid[k],
                eta,
                partial: Box::new(partial),
            });
        }
    }
    let eta_final = *opts.eta_ladder.last().unwrap();
    Ok(assemble(&red, &grid, &state, eta_final, atom, true))
}

fn assemble(
    red: &Reduced,
    grid: &DVector<f64>,
    state: &[Vec<Complex64>],
    eta: f64,
    atom: f64,
    converged: bool,
) -> DysonSolution {
    let stieltjes: Vec<Complex64> = state.iter().map(|ms| red.average(ms)).collect();
    let density = DVector::from_iterator(
        grid.len(),
        grid.iter()
            .zip(&stieltjes)
            .map(|(&t, &mb)| density_from(mb, t, eta, atom)),
    );
    DysonSolution {
        grid: grid.clone(),
        density,
        atom,
        stieltjes,
        eta_final: eta,
        converged,
    }
}

/// Per-row solution `(m_i(z))` at a single `z ∈ ℍ`, iterated directly from `−1/z`.
pub fn solve_dyson_point(
    profile: &VarianceProfile,
    z: Complex64,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<Complex64>> {
    if !(z.im > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "z must lie in the upper half-plane, got {z}"
        )));
    }
    let red = Reduced::new(&profile.s);
    let expand = |ms: &[Complex64]| DVector::from_iterator(red.m, red.row_class.iter().map(|&a| ms[a]));
    match red.solve(z, red.initial(z), tol, max_iter) {
        PointOutcome::Converged(ms) => Ok(expand(&ms)),
        PointOutcome::LeftHalfPlane => Err(Error::LeftHalfPlane { tau: z.re, eta: z.im }),
        PointOutcome::Stalled(ms) => {
            let grid = DVector::from_element(1, z.re);
            let partial = assemble(&red, &grid, &[ms], z.im, profile.atom(), false);
            Err(Error::NoConvergence {
                tau: z.re,
                eta: z.im,
                partial: Box::new(partial),
            })
        }
    }
}
