//! Piecewise-constant densities on `[0,1]` and `[0,1]²`, distances between
//! them, and the margin/cost summaries used by the stability bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{MarginPair, ScalingProblem};

/// Density on `[0,1]`, constant on the cells `((i−1)/m, i/m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity1D {
    pub values: DVector<f64>,
}

/// Density on `[0,1]²`, constant on the cells `((i−1)/m, i/m] × ((j−1)/n, j/n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity2D {
    pub values: DMatrix<f64>,
}

/// Common view used by the distance functions.
pub trait GridDensity {
    fn shape(&self) -> (usize, usize);
    fn cells(&self) -> &[f64];

    fn cell_measure(&self) -> f64 {
        let (m, n) = self.shape();
        1.0 / (m * n) as f64
    }

    /// `∫ density`, i.e. the total mass.
    fn mass(&self) -> f64 {
        self.cells().iter().sum::<f64>() * self.cell_measure()
    }
}

impl GridDensity for GridDensity1D {
    fn shape(&self) -> (usize, usize) {
        (self.values.len(), 1)
    }

    fn cells(&self) -> &[f64] {
        self.values.as_slice()
    }
}

impl GridDensity for GridDensity2D {
    fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    fn cells(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Cell index (0-based) of `x ∈ [0,1]` under the `⌈m x⌉` convention, with `x = 0`
/// sent to the first cell.
pub fn cell_index(x: f64, m: usize) -> usize {
    ((x * m as f64).ceil() as usize).clamp(1, m) - 1
}

impl GridDensity1D {
    pub fn eval(&self, x: f64) -> f64 {
        self.values[cell_index(x, self.values.len())]
    }

    /// The same density on a grid `factor` times finer.
    pub fn refine(&self, factor: usize) -> Self {
        let m = self.values.len();
        Self {
            values: DVector::from_fn(m * factor, |i, _| self.values[i / factor]),
        }
    }
}

impl GridDensity2D {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (m, n) = self.values.shape();
        self.values[(cell_index(x, m), cell_index(y, n))]
    }

    pub fn refine(&self, fm: usize, fn_: usize) -> Self {
        let (m, n) = self.values.shape();
        Self {
            values: DMatrix::from_fn(m * fm, n * fn_, |i, j| self.values[(i / fm, j / fn_)]),
        }
    }

    /// Both densities on their least common refinement.
    pub fn common_refinement(&self, other: &Self) -> (Self, Self) {
        let (m1, n1) = self.values.shape();
        let (m2, n2) = other.values.shape();
        let (lm, ln) = (lcm(m1, m2), lcm(n1, n2));
        (self.refine(lm / m1, ln / n1), other.refine(lm / m2, ln / n2))
    }

    /// Row marginal as a density on `[0,1]`.
    pub fn row_marginal(&self) -> GridDensity1D {
        let n = self.values.ncols() as f64;
        GridDensity1D {
            values: self.values.column_sum() / n,
        }
    }

    pub fn col_marginal(&self) -> GridDensity1D {
        let m = self.values.nrows() as f64;
        GridDensity1D {
            values: self.values.row_sum().transpose() / m,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// `ρ(x) = (m / total) v(⌈m x⌉)`.
pub fn histogram_density_1d(v: &DVector<f64>, total: f64) -> Result<GridDensity1D> {
    if !(total > 0.0) {
        return Err(Error::NonPositiveTotal(total));
    }
    Ok(GridDensity1D {
        values: v * (v.len() as f64 / total),
    })
}

/// `φ(x, y) = (m n / total) M(⌈m x⌉, ⌈n y⌉)`.
pub fn kernel_density_2d(mat: &DMatrix<f64>, total: f64) -> Result<GridDensity2D> {
    if !(total > 0.0) {
        return Err(Error::NonPositiveTotal(total));
    }
    let (m, n) = mat.shape();
    Ok(GridDensity2D {
        values: mat * ((m * n) as f64 / total),
    })
}

fn same_grid<D: GridDensity>(p: &D, q: &D) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    Ok(())
}

pub fn hellinger<D: GridDensity>(p: &D, q: &D) -> Result<f64> {
    same_grid(p, q)?;
    let s: f64 = p
        .cells()
        .iter()
        .zip(q.cells())
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((s * p.cell_measure()).sqrt())
}

/// `∫ |p − q|`; this is the un-halved total variation.
pub fn total_variation<D: GridDensity>(p: &D, q: &D) -> Result<f64> {
    l1_density_distance(p, q)
}

pub fn l1_density_distance<D: GridDensity>(p: &D, q: &D) -> Result<f64> {
    same_grid(p, q)?;
    let s: f64 = p.cells().iter().zip(q.cells()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s * p.cell_measure())
}

/// `∫ p log(p/q)` with `0 log 0 = 0`; `+∞` when `p` is not dominated by `q`.
pub fn kl_divergence<D: GridDensity>(p: &D, q: &D) -> Result<f64> {
    same_grid(p, q)?;
    let mut s = 0.0;
    for (&a, &b) in p.cells().iter().zip(q.cells()) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s * p.cell_measure())
}

/// Discrete Hellinger distance between two nonnegative arrays of equal shape.
pub fn discrete_hellinger(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", p.shape(), q.shape())));
    }
    Ok(p.iter()
        .zip(q.iter())
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Largest `δ` with `δN/m ≤ r_i ≤ N/(δm)` and `δN/n ≤ c_j ≤ N/(δn)`.
pub fn delta_smoothness(margins: &MarginPair) -> Result<f64> {
    margins.require_positive()?;
    let total = margins.total();
    let side = |v: &DVector<f64>| {
        let k = v.len() as f64;
        (v.min() * k / total).min(total / (k * v.max()))
    };
    Ok(side(margins.r()).min(side(margins.c())))
}

/// `K = max |log(r_i c_j ‖Λ‖₁ / (Λ_ij N²))|`.
pub fn cost_bound_k(problem: &ScalingProblem) -> Result<f64> {
    let lam = problem.lambda();
    let mg = problem.margins();
    let l1 = lam.sum();
    let n2 = mg.total() * mg.total();
    let mut k = 0.0f64;
    for j in 0..lam.ncols() {
        for i in 0..lam.nrows() {
            let l = lam[(i, j)];
            if l <= 0.0 {
                return Err(Error::ZeroEntry { i, j });
            }
            k = k.max((mg.r()[i] * mg.c()[j] * l1 / (l * n2)).ln().abs());
        }
    }
    Ok(k)
}

const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// `∫_{[0,1]²} g φ`, each cell integrated by 4×4 Gauss–Legendre.
pub fn integrate_test<G: Fn(f64, f64) -> f64>(g: G, d: &GridDensity2D) -> f64 {
    let (m, n) = d.values.shape();
    let (hx, hy) = (1.0 / m as f64, 1.0 / n as f64);
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..m {
            let v = d.values[(i, j)];
            if v == 0.0 {
                continue;
            }
            let (cx, cy) = ((i as f64 + 0.5) * hx, (j as f64 + 0.5) * hy);
            let mut cell = 0.0;
            for (xa, wa) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                for (yb, wb) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                    cell += wa * wb * g(cx + 0.5 * hx * xa, cy + 0.5 * hy * yb);
                }
            }
            total += v * cell * 0.25 * hx * hy;
        }
    }
    total
}

/// Named test functions accepted by experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Constant,
    CoordinateX,
    CoordinateY,
    ProductXy,
    CosineBump,
}

impl TestFunction {
    pub const ALL: [TestFunction; 5] = [
        TestFunction::Constant,
        TestFunction::CoordinateX,
        TestFunction::CoordinateY,
        TestFunction::ProductXy,
        TestFunction::CosineBump,
    ];

    pub fn eval(self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            TestFunction::Constant => 1.0,
            TestFunction::CoordinateX => x,
            TestFunction::CoordinateY => y,
            TestFunction::ProductXy => x * y,
            TestFunction::CosineBump => (PI * (x - 0.5)).cos().powi(2) * (PI * (y - 0.5)).cos().powi(2),
        }
    }

    /// `‖g‖∞` on `[0,1]²`.
    pub fn sup_norm(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Constant => "constant",
            TestFunction::CoordinateX => "coordinate_x",
            TestFunction::CoordinateY => "coordinate_y",
            TestFunction::ProductXy => "product_xy",
            TestFunction::CosineBump => "cosine_bump",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown test function {name:?}")))
    }
}
