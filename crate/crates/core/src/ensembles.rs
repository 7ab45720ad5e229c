//! Random matrices with prescribed means, their sub-exponential parameters,
//! and the mean/margin constructors used by the experiments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::MarginPair;

/// Entry law, parameterized by its mean `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Poisson,
    /// `P(X = 1) = λ`; requires `λ ∈ (0, 1)`.
    Bernoulli,
    /// Exponential with mean `λ`.
    Exponential,
    /// Uniform on `[0, 2λ]`.
    Uniform,
}

impl EntryKind {
    pub fn variance(self, mean: f64) -> f64 {
        match self {
            EntryKind::Poisson => mean,
            EntryKind::Bernoulli => mean * (1.0 - mean),
            EntryKind::Exponential => mean * mean,
            EntryKind::Uniform => mean * mean / 3.0,
        }
    }

    pub fn check_mean(self, mean: f64) -> Result<()> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "entry mean must be positive, got {mean}"
            )));
        }
        if self == EntryKind::Bernoulli && mean >= 1.0 {
            return Err(Error::BernoulliMeanOutOfRange(mean));
        }
        Ok(())
    }

    /// One draw with the given mean. The mean must have passed [`check_mean`](Self::check_mean).
    pub fn sample<R: Rng + ?Sized>(self, mean: f64, rng: &mut R) -> f64 {
        match self {
            EntryKind::Poisson => Poisson::new(mean).expect("positive mean").sample(rng),
            EntryKind::Bernoulli => f64::from(u8::from(rng.gen::<f64>() < mean)),
            EntryKind::Exponential => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
            EntryKind::Uniform => 2.0 * mean * rng.gen::<f64>(),
        }
    }

    /// `(σ, R)` with `E|X − λ|^q ≤ (q!/2) σ² R^{q−2}` for every `q ≥ 2` and every
    /// mean up to `lambda_max`.
    pub fn subexp_params(self, lambda_max: f64) -> (f64, f64) {
        let l = lambda_max;
        match self {
            // R = 1 fails at q = 4 once λ > 11/3; R = √λ restores the
            // Gaussian-regime growth (q−1)!! λ^{q/2} of the central moments.
            EntryKind::Poisson => (l.sqrt(), l.sqrt().max(1.0)),
            EntryKind::Bernoulli => (0.5, 1.0),
            EntryKind::Exponential => ((2.0f64).sqrt() * l, 2.0 * l),
            EntryKind::Uniform => (l / 3f64.sqrt(), l),
        }
    }
}

/// Generator for trial `stream` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent entries with `E[X_ij] = Λ_ij`, drawn in row-major order from
/// stream `stream` of `seed`.
pub fn sample_matrix(lambda: &DMatrix<f64>, kind: EntryKind, seed: u64, stream: u64) -> Result<DMatrix<f64>> {
    let mut rng = trial_rng(seed, stream);
    sample_matrix_with(lambda, kind, &mut rng)
}

pub fn sample_matrix_with<R: Rng + ?Sized>(
    lambda: &DMatrix<f64>,
    kind: EntryKind,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    for &l in lambda.iter() {
        kind.check_mean(l)?;
    }
    let (m, n) = lambda.shape();
    let mut out = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            out[(i, j)] = kind.sample(lambda[(i, j)], rng);
        }
    }
    Ok(out)
}

pub fn variance_matrix(lambda: &DMatrix<f64>, kind: EntryKind) -> DMatrix<f64> {
    lambda.map(|l| kind.variance(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginSpec {
    /// `r = fraction·n·1_m`, `c = fraction·m·1_n`.
    Uniform { fraction: f64 },
    /// `r_i = lo·n` for the first `⌈split·m⌉` rows and `hi·n` after; `c` uniform.
    RowBlock { lo: f64, hi: f64, split: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanSpec {
    Homogeneous {
        lambda: f64,
    },
    /// `Λ_ij = lo` for the first `⌈split·m⌉` rows and `hi` after.
    RowBlock {
        lo: f64,
        hi: f64,
        split: f64,
    },
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n: usize,
    pub margin: MarginSpec,
    pub mean: MeanSpec,
    pub dist: EntryKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

impl ExperimentConfig {
    /// Uniform margins `fraction·n` with a homogeneous mean, square `n × n`.
    pub fn homogeneous(n: usize, fraction: f64, lambda: f64, dist: EntryKind) -> Self {
        Self {
            m: n,
            n,
            margin: MarginSpec::Uniform { fraction },
            mean: MeanSpec::Homogeneous { lambda },
            dist,
            seed: 0,
            trials: 1,
        }
    }

    /// Row-block margins `{0.1n, 0.5n}`, uniform columns and block mean `{0.2, 0.6}`.
    pub fn two_block(n: usize, dist: EntryKind) -> Self {
        Self {
            m: n,
            n,
            margin: MarginSpec::RowBlock {
                lo: 0.1,
                hi: 0.5,
                split: 0.5,
            },
            mean: MeanSpec::RowBlock {
                lo: 0.2,
                hi: 0.6,
                split: 0.5,
            },
            dist,
            seed: 0,
            trials: 1,
        }
    }
}

fn split_index(split: f64, m: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&split) {
        return Err(Error::InfeasibleSpec(format!("split must lie in [0, 1], got {split}")));
    }
    Ok(((split * m as f64).ceil() as usize).min(m))
}

pub fn build_config_matrices(cfg: &ExperimentConfig) -> Result<(DMatrix<f64>, MarginPair)> {
    let (m, n) = (cfg.m, cfg.n);
    if m == 0 || n == 0 {
        return Err(Error::InfeasibleSpec("dimensions must be positive".into()));
    }
    let (mf, nf) = (m as f64, n as f64);
    let positive = |x: f64, what: &str| {
        if x > 0.0 && x.is_finite() {
            Ok(())
        } else {
            Err(Error::InfeasibleSpec(format!("{what} must be positive, got {x}")))
        }
    };
    let lambda = match cfg.mean {
        MeanSpec::Homogeneous { lambda } => {
            positive(lambda, "mean")?;
            DMatrix::from_element(m, n, lambda)
        }
        MeanSpec::RowBlock { lo, hi, split } => {
            positive(lo, "block mean")?;
            positive(hi, "block mean")?;
            let k = split_index(split, m)?;
            DMatrix::from_fn(m, n, |i, _| if i < k { lo } else { hi })
        }
    };
    let margins = match cfg.margin {
        MarginSpec::Uniform { fraction } => {
            positive(fraction, "margin fraction")?;
            MarginPair::new(
                DVector::from_element(m, fraction * nf),
                DVector::from_element(n, fraction * mf),
            )
        }
        MarginSpec::RowBlock { lo, hi, split } => {
            positive(lo, "block margin")?;
            positive(hi, "block margin")?;
            let k = split_index(split, m)?;
            let r = DVector::from_fn(m, |i, _| if i < k { lo * nf } else { hi * nf });
            let total = r.sum();
            MarginPair::new(r, DVector::from_element(n, total / nf))
        }
    }
    .map_err(|e| Error::InfeasibleSpec(e.to_string()))?;
    for &l in lambda.iter() {
        cfg.dist.check_mean(l)?;
    }
    Ok((lambda, margins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::delta_smoothness;

    /// `E|X − λ|^q` for Poisson(λ), summed over the pmf.
    fn poisson_central_moment(l: f64, q: i32) -> f64 {
        let mut pmf = (-l).exp();
        let mut acc = 0.0;
        let kmax = (l + 60.0 * l.sqrt() + 60.0) as usize;
        for k in 0..kmax {
            if k > 0 {
                pmf *= l / k as f64;
            }
            acc += pmf * (k as f64 - l).abs().powi(q);
        }
        acc
    }

    /// `E|X − λ|^q` for Exponential(mean λ): `λ^q (∫₀¹ (1−x)^q e^{−x} dx + q!/e)`.
    fn exponential_central_moment(l: f64, q: i32) -> f64 {
        let steps = 200_000;
        let h = 1.0 / steps as f64;
        let head: f64 = (0..steps)
            .map(|k| {
                let x = (k as f64 + 0.5) * h;
                (1.0 - x).powi(q) * (-x).exp() * h
            })
            .sum();
        l.powi(q) * (head + factorial(q) / std::f64::consts::E)
    }

    fn factorial(q: i32) -> f64 {
        (1..=q).map(f64::from).product()
    }

    fn bound(q: i32, sigma: f64, r: f64) -> f64 {
        factorial(q) / 2.0 * sigma * sigma * r.powi(q - 2)
    }

    #[test]
    fn moment_growth_certificates() {
        for &l in &[0.05, 0.4, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let (s, r) = EntryKind::Poisson.subexp_params(l);
            for q in 2..=8 {
                let mom = poisson_central_moment(l, q);
                assert!(
                    mom <= bound(q, s, r) * (1.0 + 1e-12),
                    "poisson λ={l} q={q}: {mom} > {}",
                    bound(q, s, r)
                );
            }
            let (s, r) = EntryKind::Exponential.subexp_params(l);
            let (su, ru) = EntryKind::Uniform.subexp_params(l);
            for q in 2..=8 {
                assert!(exponential_central_moment(l, q) <= bound(q, s, r));
                // |U − λ| is uniform on [0, λ]: E|U − λ|^q = λ^q/(q+1).
                assert!(l.powi(q) / f64::from(q + 1) <= bound(q, su, ru) * (1.0 + 1e-12));
            }
        }
        for &p in &[0.01, 0.3, 0.5, 0.9] {
            let (s, r) = EntryKind::Bernoulli.subexp_params(p);
            for q in 2..=8 {
                let mom = p * (1.0 - p).powi(q) + (1.0 - p) * p.powi(q);
                assert!(mom <= bound(q, s, r));
            }
        }
        // Poisson(1): the q = 2 moment is the variance.
        assert!((poisson_central_moment(1.0, 2) - 1.0).abs() < 1e-12);
        // The literal R = 1 fails for larger means.
        assert!(poisson_central_moment(5.0, 4) > bound(4, 5f64.sqrt(), 1.0));
    }

    #[test]
    fn calibration_of_draws() {
        // Tolerance is 1% or four standard errors, whichever is larger: the
        // sample variance of 10⁵ exponential draws has a 0.9% standard error.
        let mut rng = trial_rng(5, 0);
        let count = 100_000;
        for (kind, mean) in [
            (EntryKind::Poisson, 0.4),
            (EntryKind::Poisson, 6.0),
            (EntryKind::Bernoulli, 0.3),
            (EntryKind::Exponential, 2.0),
            (EntryKind::Uniform, 1.5),
        ] {
            let xs: Vec<f64> = (0..count).map(|_| kind.sample(mean, &mut rng)).collect();
            let nf = count as f64;
            let mu = xs.iter().sum::<f64>() / nf;
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0);
            let m4 = xs.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / nf;
            let se_mean = (kind.variance(mean) / nf).sqrt();
            let se_var = ((m4 - var * var) / nf).sqrt();
            assert!(
                (mu - mean).abs() <= (0.01 * mean).max(4.0 * se_mean),
                "{kind:?} mean {mu}"
            );
            let v = kind.variance(mean);
            assert!((var - v).abs() <= (0.01 * v).max(4.0 * se_var), "{kind:?} var {var}");
        }
    }

    #[test]
    fn sampling_supports_and_reproducibility() {
        let lam = DMatrix::from_fn(6, 7, |i, j| 0.1 + 0.1 * ((i + j) % 5) as f64);
        let u = sample_matrix(&lam, EntryKind::Uniform, 1, 0).unwrap();
        assert!(u.iter().zip(lam.iter()).all(|(x, l)| *x >= 0.0 && *x <= 2.0 * l));
        let b = sample_matrix(&lam, EntryKind::Bernoulli, 1, 0).unwrap();
        assert!(b.iter().all(|&x| x == 0.0 || x == 1.0));
        let a1 = sample_matrix(&lam, EntryKind::Poisson, 9, 3).unwrap();
        let a2 = sample_matrix(&lam, EntryKind::Poisson, 9, 3).unwrap();
        let a3 = sample_matrix(&lam, EntryKind::Poisson, 9, 4).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, a3);
        assert!(matches!(
            sample_matrix(&DMatrix::from_element(1, 1, 1.5), EntryKind::Bernoulli, 0, 0),
            Err(Error::BernoulliMeanOutOfRange(_))
        ));
    }

    #[test]
    fn poisson_sample_mean_lln() {
        // 10⁴ homogeneous 20×20 Poisson(0.4) draws: per-entry means within
        // 3σ/100 of 0.4 on average.
        let lam = DMatrix::from_element(20, 20, 0.4);
        let mut acc = DMatrix::zeros(20, 20);
        let mut rng = trial_rng(2, 0);
        for _ in 0..10_000 {
            acc += sample_matrix_with(&lam, EntryKind::Poisson, &mut rng).unwrap();
        }
        acc /= 10_000.0;
        let mean_abs_dev = acc.iter().map(|x| (x - 0.4).abs()).sum::<f64>() / 400.0;
        assert!(mean_abs_dev <= 3.0 * 0.4f64.sqrt() / 100.0, "{mean_abs_dev}");
    }

    #[test]
    fn figure_configs() {
        let (lam, mg) =
            build_config_matrices(&ExperimentConfig::homogeneous(100, 0.3, 0.4, EntryKind::Poisson)).unwrap();
        assert!(lam.iter().all(|&x| x == 0.4));
        assert!(mg.r().iter().chain(mg.c().iter()).all(|&x| (x - 30.0).abs() < 1e-12));
        assert_eq!(delta_smoothness(&mg).unwrap(), 1.0);

        let (lam, mg) = build_config_matrices(&ExperimentConfig::two_block(100, EntryKind::Poisson)).unwrap();
        assert_eq!(mg.r().iter().filter(|&&x| x == 10.0).count(), 50);
        assert_eq!(mg.r().iter().filter(|&&x| x == 50.0).count(), 50);
        assert_eq!(mg.r().sum(), 3000.0);
        assert!((mg.c().sum() - 3000.0).abs() < 1e-9);
        assert_eq!(lam[(0, 0)], 0.2);
        assert_eq!(lam[(99, 0)], 0.6);

        let mut bad = ExperimentConfig::two_block(10, EntryKind::Poisson);
        bad.margin = MarginSpec::RowBlock {
            lo: 0.1,
            hi: 0.5,
            split: 1.5,
        };
        assert!(matches!(build_config_matrices(&bad), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let ok = r#"{"m":4,"n":4,"margin":{"kind":"uniform","fraction":0.3},"mean":{"kind":"homogeneous","lambda":0.4},"dist":"poisson"}"#;
        let cfg: ExperimentConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.seed, 0);
        let bad = r#"{"m":4,"n":4,"margin":{"kind":"uniform","fraction":0.3},"mean":{"kind":"homogeneous","lambda":0.4},"dist":"poisson","extra":1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
    }
}
