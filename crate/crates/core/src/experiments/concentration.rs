//! Concentration of random potentials (event E₁), the comparison-model
//! events E₂/E₃ and the test-function approximation.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{frequency, run_indexed, Quantiles};
use crate::ensembles::{build_config_matrices, sample_matrix, variance_matrix, ExperimentConfig};
use crate::error::Result;
use crate::measures::{integrate_test, kernel_density_2d, TestFunction};
use crate::scaling::{
    gauge_distance, margin_error, sinkhorn_scale, sinkhorn_scale_warm, Potentials, ScalingProblem, SinkhornOptions,
};
use crate::spectral::{flatness_smax, spectral_norm, FluctuationScale};
use crate::stability::{concentration_constants, StabilityConstants};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConcentrationOptions {
    pub d_param: f64,
    /// Evaluate the E₂ spectral norm; it dominates the cost at large `n`.
    pub spectral: bool,
    pub sinkhorn_tol: f64,
}

impl Default for ConcentrationOptions {
    fn default() -> Self {
        Self {
            d_param: 1.0,
            spectral: true,
            sinkhorn_tol: 1e-11,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationTrial {
    pub trial: u64,
    /// Sinkhorn reached tolerance on `X`; all other fields are NaN/false otherwise.
    pub scalable: bool,
    pub gauge_distance: f64,
    pub margin_error: f64,
    /// `‖X − Λ‖₂`; NaN when the spectral pass is disabled.
    pub noise_norm: f64,
    /// `(1/N)‖D(e^{α_X})(X−Λ)D(e^{β_X}) − D(e^α)(X−Λ)D(e^β)‖₂`.
    pub e2_lhs: f64,
    /// `(1/N)‖X^{r,c} − X̂^{r,c}‖₁`.
    pub e3_lhs: f64,
    pub mass: f64,
    pub e1: bool,
    pub e2: bool,
    pub e3: bool,
    /// `‖X − Λ‖₂ ≤ t_D`.
    pub noise_event: bool,
    /// `ΣX ≤ 2‖Λ‖₁`.
    pub mass_event: bool,
}

/// Explicit parts of the probability lower bounds. The `m² exp(−cΦ)` term has
/// an unspecified absolute constant and is omitted, so these are upper
/// envelopes of the stated bounds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbabilityBounds {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationReport {
    pub config: ExperimentConfig,
    pub options: ConcentrationOptions,
    pub constants: StabilityConstants,
    pub e1_radius: f64,
    pub e2_bound: f64,
    pub e3_bound: f64,
    pub eps0_admissible: bool,
    pub probability_bounds: ProbabilityBounds,
    pub failed: usize,
    pub gauge_distance: Quantiles,
    pub e2_lhs: Quantiles,
    pub e3_lhs: Quantiles,
    pub freq_e1: f64,
    pub freq_e2: f64,
    pub freq_e3: f64,
    pub freq_noise: f64,
    pub freq_mass: f64,
    /// Trials in `E₁ ∩ {‖X−Λ‖₂ ≤ t_D}` whose E₂ inequality fails.
    pub joint_violations_e2: usize,
    /// Trials in `E₁ ∩ {ΣX ≤ 2‖Λ‖₁}` whose E₃ inequality fails.
    pub joint_violations_e3: usize,
    pub trials: Vec<ConcentrationTrial>,
}

/// Mean problem, its potentials and the constants for `cfg`.
pub(crate) struct MeanModel {
    pub problem: ScalingProblem,
    pub potentials: Potentials,
    pub constants: StabilityConstants,
}

pub(crate) fn mean_model(cfg: &ExperimentConfig, d_param: f64, tol: f64) -> Result<MeanModel> {
    let (lambda, margins) = build_config_matrices(cfg)?;
    let problem = ScalingProblem::new(lambda, margins)?;
    let potentials = sinkhorn_scale(&problem, &SinkhornOptions::with_tol(tol))?.potentials;
    let lam = problem.lambda();
    let (sigma, r_param) = cfg.dist.subexp_params(lam.max());
    let s_max = flatness_smax(&potentials, &variance_matrix(lam, cfg.dist))?;
    let constants = concentration_constants(&problem, sigma, r_param, d_param, s_max, FluctuationScale::MaxDim)?;
    Ok(MeanModel {
        problem,
        potentials,
        constants,
    })
}

pub fn run_concentration_experiment(cfg: &ExperimentConfig, d_param: f64) -> Result<ConcentrationReport> {
    run_concentration_experiment_with(
        cfg,
        &ConcentrationOptions {
            d_param,
            ..Default::default()
        },
    )
}

pub fn run_concentration_experiment_with(
    cfg: &ExperimentConfig,
    opts: &ConcentrationOptions,
) -> Result<ConcentrationReport> {
    let model = mean_model(cfg, opts.d_param, opts.sinkhorn_tol.min(1e-12))?;
    let lam = model.problem.lambda();
    let trials = run_indexed(cfg.trials, |t| -> Result<ConcentrationTrial> {
        let x = sample_matrix(lam, cfg.dist, cfg.seed, t)?;
        let mut trial = evaluate_trial(&model, &x, opts)?;
        trial.trial = t;
        Ok(trial)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let c = &model.constants;
    let ok: Vec<&ConcentrationTrial> = trials.iter().filter(|t| t.scalable).collect();
    let pick = |f: fn(&ConcentrationTrial) -> f64| ok.iter().map(|t| f(t)).collect::<Vec<_>>();
    let big = cfg.m.max(cfg.n) as f64;
    let tail = big.powf(-opts.d_param);
    let (mnf, l1) = ((cfg.m * cfg.n) as f64, c.lambda_l1);
    let bernstein = 2.0 * (-(l1 * l1 / 2.0) / (mnf * c.sigma * c.sigma + c.r_param * l1)).exp();
    Ok(ConcentrationReport {
        config: cfg.clone(),
        options: *opts,
        e1_radius: c.e1_radius(),
        e2_bound: c.e2_bound(),
        e3_bound: c.e3_bound(),
        eps0_admissible: c.eps0_admissible(),
        probability_bounds: ProbabilityBounds {
            e1: 1.0 - tail,
            e2: 1.0 - 2.0 * tail,
            e3: 1.0 - tail - bernstein,
            phi: c.phi,
        },
        failed: trials.len() - ok.len(),
        gauge_distance: Quantiles::of(&pick(|t| t.gauge_distance)),
        e2_lhs: Quantiles::of(&pick(|t| t.e2_lhs)),
        e3_lhs: Quantiles::of(&pick(|t| t.e3_lhs)),
        freq_e1: frequency(ok.iter().map(|t| t.e1)),
        freq_e2: if opts.spectral {
            frequency(ok.iter().map(|t| t.e2))
        } else {
            f64::NAN
        },
        freq_e3: frequency(ok.iter().map(|t| t.e3)),
        freq_noise: if opts.spectral {
            frequency(ok.iter().map(|t| t.noise_event))
        } else {
            f64::NAN
        },
        freq_mass: frequency(ok.iter().map(|t| t.mass_event)),
        joint_violations_e2: ok.iter().filter(|t| t.e1 && t.noise_event && !t.e2).count(),
        joint_violations_e3: ok.iter().filter(|t| t.e1 && t.mass_event && !t.e3).count(),
        constants: model.constants,
        trials,
    })
}

fn failed_trial(mass: f64) -> ConcentrationTrial {
    ConcentrationTrial {
        trial: 0,
        scalable: false,
        gauge_distance: f64::NAN,
        margin_error: f64::NAN,
        noise_norm: f64::NAN,
        e2_lhs: f64::NAN,
        e3_lhs: f64::NAN,
        mass,
        e1: false,
        e2: false,
        e3: false,
        noise_event: false,
        mass_event: false,
    }
}

/// Scales `X`, then measures every per-trial quantity against the mean model.
/// A sample that Sinkhorn cannot scale is a failed trial, not an error.
pub(crate) fn evaluate_trial(
    model: &MeanModel,
    x: &DMatrix<f64>,
    opts: &ConcentrationOptions,
) -> Result<ConcentrationTrial> {
    let lam = model.problem.lambda();
    let c = &model.constants;
    let mass = x.sum();
    let Ok(xp) = ScalingProblem::new(x.clone(), model.problem.margins().clone()) else {
        return Ok(failed_trial(mass));
    };
    let Ok(res) = sinkhorn_scale_warm(&xp, &SinkhornOptions::with_tol(opts.sinkhorn_tol), &model.potentials) else {
        return Ok(failed_trial(mass));
    };
    let px = &res.potentials;
    let pm = &model.potentials;
    let total = c.total;
    let gd = gauge_distance(px, pm)?;

    let ratio = DMatrix::from_fn(lam.nrows(), lam.ncols(), |i, j| {
        (px.alpha[i] + px.beta[j]).exp() - (pm.alpha[i] + pm.beta[j]).exp()
    });
    let e3_lhs = x.component_mul(&ratio).abs().sum() / total;
    let (noise_norm, e2_lhs) = if opts.spectral {
        let centered = x - lam;
        (
            spectral_norm(&centered)?,
            spectral_norm(&centered.component_mul(&ratio))? / total,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ConcentrationTrial {
        trial: 0,
        scalable: true,
        gauge_distance: gd,
        margin_error: margin_error(&res.rescaled, model.problem.margins()),
        noise_norm,
        e2_lhs,
        e3_lhs,
        mass,
        e1: gd <= c.e1_radius(),
        e2: e2_lhs <= c.e2_bound(),
        e3: e3_lhs <= c.e3_bound(),
        noise_event: noise_norm <= c.t_d,
        mass_event: mass <= 2.0 * c.lambda_l1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TestFunctionTrial {
    pub trial: u64,
    pub scalable: bool,
    /// `|∫ g (φ_{X^{r,c}} − φ_{Λ^{r,c}})|`.
    pub lhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TestFunctionReport {
    pub config: ExperimentConfig,
    pub test_function: TestFunction,
    pub d_param: f64,
    pub rhs: f64,
    pub failed: usize,
    pub frequency: f64,
    pub lhs: Quantiles,
    pub trials: Vec<TestFunctionTrial>,
}

pub fn run_test_function_experiment(
    cfg: &ExperimentConfig,
    g: TestFunction,
    d_param: f64,
) -> Result<TestFunctionReport> {
    let tol = 1e-11;
    let model = mean_model(cfg, d_param, 1e-12)?;
    let lam = model.problem.lambda();
    let margins = model.problem.margins();
    let total = margins.total();
    let mean_bridge = model.potentials.apply(lam);
    let rhs = model.constants.test_function_rhs(g.sup_norm());
    let trials = run_indexed(cfg.trials, |t| -> Result<TestFunctionTrial> {
        let x = sample_matrix(lam, cfg.dist, cfg.seed, t)?;
        let scaled = ScalingProblem::new(x, margins.clone())
            .and_then(|p| sinkhorn_scale_warm(&p, &SinkhornOptions::with_tol(tol), &model.potentials));
        Ok(match scaled {
            Ok(res) => {
                let diff = kernel_density_2d(&(&res.rescaled - &mean_bridge), total)?;
                let lhs = integrate_test(|x, y| g.eval(x, y), &diff).abs();
                TestFunctionTrial {
                    trial: t,
                    scalable: true,
                    lhs,
                    holds: lhs <= rhs,
                }
            }
            Err(_) => TestFunctionTrial {
                trial: t,
                scalable: false,
                lhs: f64::NAN,
                holds: false,
            },
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ok: Vec<&TestFunctionTrial> = trials.iter().filter(|t| t.scalable).collect();
    Ok(TestFunctionReport {
        config: cfg.clone(),
        test_function: g,
        d_param,
        rhs,
        failed: trials.len() - ok.len(),
        frequency: frequency(ok.iter().map(|t| t.holds)),
        lhs: Quantiles::of(&ok.iter().map(|t| t.lhs).collect::<Vec<_>>()),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::EntryKind;

    fn small(n: usize, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            trials,
            seed: 5,
            ..ExperimentConfig::homogeneous(n, 0.3, 2.0, EntryKind::Poisson)
        }
    }

    #[test]
    fn mean_sample_has_no_deviation() {
        let model = mean_model(&small(12, 1), 1.0, 1e-12).unwrap();
        let lam = model.problem.lambda().clone();
        let t = evaluate_trial(&model, &lam, &ConcentrationOptions::default()).unwrap();
        assert!(t.scalable);
        assert!(t.gauge_distance < 1e-10, "{}", t.gauge_distance);
        assert!(t.e2_lhs == 0.0 && t.noise_norm == 0.0);
        assert!(t.e3_lhs < 1e-10);
        assert!(t.e1 && t.e2 && t.e3 && t.noise_event && t.mass_event);
    }

    #[test]
    fn report_is_reproducible_and_complete() {
        let cfg = small(30, 6);
        let a = run_concentration_experiment(&cfg, 1.0).unwrap();
        let b = run_concentration_experiment(&cfg, 1.0).unwrap();
        assert_eq!(a.trials.len(), cfg.trials);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.trials.iter().enumerate().all(|(k, t)| t.trial == k as u64));
        assert!(a.gauge_distance.median > 0.0);
        // The spectral-norm pass does not change the scalar statistics.
        let cheap = run_concentration_experiment_with(
            &cfg,
            &ConcentrationOptions {
                spectral: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cheap.gauge_distance, a.gauge_distance);
        assert!(cheap.freq_e2.is_nan());
    }

    #[test]
    fn e3_lhs_matches_direct_form() {
        let model = mean_model(&small(10, 1), 1.0, 1e-12).unwrap();
        let x = sample_matrix(model.problem.lambda(), EntryKind::Poisson, 1, 0).unwrap();
        let t = evaluate_trial(&model, &x, &ConcentrationOptions::default()).unwrap();
        let xp = ScalingProblem::new(x.clone(), model.problem.margins().clone()).unwrap();
        let xrc = sinkhorn_scale(&xp, &SinkhornOptions::with_tol(1e-12)).unwrap().rescaled;
        let xhat = model.potentials.apply(&x);
        let direct = (&xrc - &xhat).abs().sum() / model.constants.total;
        assert!((t.e3_lhs - direct).abs() < 1e-9 * direct.max(1e-3));
    }

    #[test]
    fn constant_test_function_has_zero_error() {
        let r = run_test_function_experiment(&small(20, 4), TestFunction::Constant, 1.0).unwrap();
        assert!(r.trials.iter().all(|t| t.lhs < 1e-10), "{:?}", r.lhs);
        assert_eq!(r.frequency, 1.0);
    }

    #[test]
    fn mixed_moment_error_decays_with_n() {
        let med = |n| {
            run_test_function_experiment(&small(n, 20), TestFunction::ProductXy, 1.0)
                .unwrap()
                .lhs
                .median
        };
        let (a, b) = (med(20), med(80));
        assert!(b < a, "{a} -> {b}");
        // A function of x alone only sees the row sums, which are pinned.
        let r = run_test_function_experiment(&small(20, 4), TestFunction::CoordinateX, 1.0).unwrap();
        assert!(r.lhs.max < 1e-9);
    }
}
