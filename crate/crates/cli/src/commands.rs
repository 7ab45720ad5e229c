use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use sbridge::ensembles::{variance_matrix, ExperimentConfig};
use sbridge::experiments::{
    potential_bound_sweep, potential_stability_sweep, run_clt_experiment, run_concentration_experiment_with,
    run_deterministic_limit_experiment, run_esd_experiment, run_test_function_experiment, sandwich_sweep,
    scalability_agreement_sweep, stability_sweep, CltConfig, ConcentrationOptions, EsdOptions, LimitConfig,
    SweepReport,
};
use sbridge::io::{self, fmt_f64, PotentialsFile, Table};
use sbridge::measures::TestFunction;
use sbridge::spectral::{flatness_smax, solve_dyson, variance_profile, DysonOptions, DysonSolution, FluctuationScale};
use sbridge::stability::concentration_constants;
use sbridge::{
    check_scalability, sinkhorn_scale, Error, Gauge, Scalability, ScalabilityMode, ScalingProblem, SinkhornOptions,
};
use serde::de::{Deserializer, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{
    CheckArgs, Command, Common, ConcentrationArgs, ConfigArgs, ConstantsArgs, DysonArgs, DysonOverrides, EsdArgs,
    Failure, GaugeArg, ScaleArg, ScaleArgs, Suite, SweepArgs,
};

type Outcome = std::result::Result<(), Failure>;

pub fn run(command: Command, common: &Common) -> Outcome {
    let ctx = Ctx {
        out: common.out.clone(),
        seed: common.seed,
    };
    match command {
        Command::Scale(a) => scale(&ctx, a),
        Command::Check(a) => check(&ctx, a),
        Command::Constants(a) => constants(&ctx, a),
        Command::StabilitySweep(a) => sweep(&ctx, a),
        Command::Dyson(a) => dyson(&ctx, a),
        Command::Esd(a) => esd(&ctx, a),
        Command::Clt(a) => clt(&ctx, a),
        Command::Concentration(a) => concentration(&ctx, a),
        Command::Limit(a) => limit(&ctx, a),
    }
}

struct Ctx {
    out: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Outcome {
        Ok(io::write_json(&self.path(name), value)?)
    }

    fn experiment(&self, path: &Path) -> Result<ExperimentConfig, Failure> {
        let mut cfg: ExperimentConfig = io::read_config(path)?;
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        Ok(cfg)
    }
}

fn scale(ctx: &Ctx, a: ScaleArgs) -> Outcome {
    let problem = ScalingProblem::new(io::read_matrix_csv(&a.matrix)?, io::read_margins_json(&a.margins)?)?;
    let gauge = match a.gauge {
        GaugeArg::BetaC => Gauge::BetaCWeighted,
        GaugeArg::MaxEqualized => Gauge::MaxEqualized,
        GaugeArg::KernelOrthogonal => Gauge::KernelOrthogonal,
    };
    let res = sinkhorn_scale(
        &problem,
        &SinkhornOptions {
            tol: a.tol,
            max_iter: a.max_iter,
            gauge,
        },
    )?;
    ctx.json("potentials.json", &PotentialsFile::from(&res.potentials))?;
    io::write_matrix_csv(&ctx.path("rescaled.csv"), &res.rescaled)?;
    let summary = json!({
        "iterations": res.iterations,
        "final_margin_error": res.final_margin_error,
        "tol": a.tol,
    });
    ctx.json("scale.json", &summary)?;
    println!("{summary}");
    Ok(())
}

fn check(ctx: &Ctx, a: CheckArgs) -> Outcome {
    let matrix = io::read_matrix_csv(&a.matrix)?;
    let margins = io::read_margins_json(&a.margins)?;
    let mode = if a.exact {
        ScalabilityMode::Exact
    } else {
        ScalabilityMode::Auto
    };
    let one_based = |v: &[usize]| v.iter().map(|i| i + 1).collect::<Vec<_>>();
    let verdict = match check_scalability(&matrix, &margins, mode)? {
        Scalability::Scalable => json!({ "scalable": true, "exact": a.exact }),
        Scalability::NotScalable { rows, cols } => json!({
            "scalable": false,
            "exact": a.exact,
            "witness": { "rows": one_based(&rows), "cols": one_based(&cols) },
        }),
    };
    ctx.json("check.json", &verdict)?;
    println!("{verdict}");
    Ok(())
}

fn constants(ctx: &Ctx, a: ConstantsArgs) -> Outcome {
    let cfg = ctx.experiment(&a.config)?;
    let (lambda, margins) = sbridge::ensembles::build_config_matrices(&cfg)?;
    let problem = ScalingProblem::new(lambda, margins)?;
    let pot = sinkhorn_scale(&problem, &SinkhornOptions::with_tol(1e-12))?.potentials;
    let lam = problem.lambda();
    let (sigma, r_param) = cfg.dist.subexp_params(lam.max());
    let s_max = flatness_smax(&pot, &variance_matrix(lam, cfg.dist))?;
    let c = concentration_constants(&problem, sigma, r_param, a.d_param, s_max, FluctuationScale::MaxDim)?;
    ctx.json(
        "constants.json",
        &json!({
            "config": cfg,
            "constants": c,
            "e1_radius": c.e1_radius(),
            "e2_bound": c.e2_bound(),
            "e3_bound": c.e3_bound(),
            "eps0_admissible": c.eps0_admissible(),
        }),
    )
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Outcome {
    let seed = ctx.seed.unwrap_or(0);
    let n = a.instances;
    match a.suite {
        Suite::Stability => write_sweep(ctx, "stability", stability_sweep(n, seed)?),
        Suite::Potential => write_sweep(ctx, "potential", potential_stability_sweep(n, seed)?),
        Suite::Sandwich => write_sweep(ctx, "sandwich", sandwich_sweep(n, seed)?),
        Suite::PotentialBound => write_sweep(ctx, "potential_bound", potential_bound_sweep(n, seed)?),
        Suite::Scalability => write_sweep(ctx, "scalability", scalability_agreement_sweep(n, a.m, a.n, seed)?),
    }
}

fn write_sweep<T: Serialize>(ctx: &Ctx, name: &str, report: SweepReport<T>) -> Outcome {
    write_rows(&ctx.path(&format!("{name}_sweep.csv")), &report.rows)?;
    let summary = json!({
        "suite": name,
        "seed": report.seed,
        "instances": report.instances,
        "violations": report.violations,
    });
    ctx.json(&format!("{name}_sweep.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn dyson_options(o: &DysonOverrides) -> DysonOptions {
    let mut opts = DysonOptions::default();
    if o.grid_points.is_some() || o.grid_hi.is_some() {
        opts.grid = DysonOptions::uniform_grid(o.grid_points.unwrap_or(opts.grid.len()), o.grid_hi.unwrap_or(4.2));
    }
    if let Some(ladder) = &o.eta_ladder {
        opts.eta_ladder = ladder.clone();
    }
    if let Some(tol) = o.tol {
        opts.tol = tol;
    }
    if let Some(max_iter) = o.max_iter {
        opts.max_iter = max_iter;
    }
    opts
}

fn fluctuation_scale(s: ScaleArg) -> FluctuationScale {
    match s {
        ScaleArg::MaxDim => FluctuationScale::MaxDim,
        ScaleArg::SumDims => FluctuationScale::SumDims,
    }
}

fn stalled(eta: f64) -> Failure {
    Failure::numeric(
        "NoConvergence",
        format!("dyson iteration stalled at eta = {eta:e}; partial artifacts were written"),
    )
}

fn dyson(ctx: &Ctx, a: DysonArgs) -> Outcome {
    let cfg = ctx.experiment(&a.config)?;
    let (lambda, margins) = sbridge::ensembles::build_config_matrices(&cfg)?;
    let problem = ScalingProblem::new(lambda, margins)?;
    let pot = sinkhorn_scale(&problem, &SinkhornOptions::with_tol(1e-12))?.potentials;
    let var = variance_matrix(problem.lambda(), cfg.dist);
    let s_max = flatness_smax(&pot, &var)?;
    let profile = variance_profile(&pot, &var, s_max, fluctuation_scale(a.dyson.scale))?;
    let sol: DysonSolution = match solve_dyson(&profile, &dyson_options(&a.dyson)) {
        Ok(sol) => sol,
        Err(Error::NoConvergence { partial, .. }) => *partial,
        Err(e) => return Err(e.into()),
    };
    let cdf = sol.cdf();
    let grid = sol.grid.as_slice();
    let table = Table::from_columns(&["tau", "density", "cdf"], &[grid, sol.density.as_slice(), &cdf])?;
    table.write(&ctx.path("dyson_density.csv"))?;
    ctx.json(
        "dyson.json",
        &json!({
            "config": cfg,
            "s_max": s_max,
            "atom": sol.atom,
            "mass": sol.mass(),
            "converged": sol.converged,
            "eta_final": sol.eta_final,
        }),
    )?;
    if sol.converged {
        Ok(())
    } else {
        Err(stalled(sol.eta_final))
    }
}

fn esd(ctx: &Ctx, a: EsdArgs) -> Outcome {
    let cfg = ctx.experiment(&a.config)?;
    let mut opts = EsdOptions::for_shape(cfg.m, cfg.n);
    opts.dyson = dyson_options(&a.dyson);
    opts.scale = fluctuation_scale(a.dyson.scale);
    opts.bins = a.bins;
    opts.d_param = a.d_param;
    let r = run_esd_experiment(&cfg, &opts)?;

    let hist = |h: &sbridge::spectral::Histogram| {
        let (lo, hi) = (&h.edges[..h.edges.len() - 1], &h.edges[1..]);
        Table::from_columns(&["lo", "hi", "density"], &[lo, hi, &h.density])
    };
    hist(&r.histogram)?.write(&ctx.path("histogram.csv"))?;
    hist(&r.singular_histogram)?.write(&ctx.path("singular_histogram.csv"))?;
    Table::from_columns(&["tau", "density", "mp"], &[&r.grid, &r.density, &r.mp])?
        .write(&ctx.path("dyson_density.csv"))?;
    Table::from_columns(&["s", "density"], &[&r.singular_grid, &r.singular_density])?
        .write(&ctx.path("singular_density.csv"))?;
    Table::from_columns(&["eigenvalue"], &[&r.eigenvalues])?.write(&ctx.path("eigenvalues.csv"))?;
    ctx.json(
        "rigidity.json",
        &json!({
            "eps_cov_theory": r.eps_cov_theory,
            "covariance_deviation": r.covariance_deviation,
            "theory": r.rigidity_theory,
            "measured": r.rigidity_measured,
        }),
    )?;
    ctx.json("esd.json", &r)?;
    println!(
        "{}",
        json!({ "ks_mp": r.ks_mp, "ks_dyson": r.ks_dyson, "hist_l1_dyson": r.hist_l1_dyson, "dyson_converged": r.dyson_converged })
    );
    if r.dyson_converged {
        Ok(())
    } else {
        Err(stalled(r.eta_final))
    }
}

fn clt(ctx: &Ctx, a: ConfigArgs) -> Outcome {
    let mut cfg: CltConfig = io::read_config(&a.config)?;
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let r = run_clt_experiment(&cfg)?;
    let matrix = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    io::write_matrix_csv(&ctx.path("theory_covariance.csv"), &matrix(&r.theory_cov))?;
    io::write_matrix_csv(&ctx.path("empirical_covariance.csv"), &matrix(&r.empirical_cov))?;
    write_rows(&ctx.path("clt_coordinates.csv"), &r.coordinates)?;
    ctx.json("clt.json", &r)?;
    println!(
        "{}",
        json!({
            "rel_frobenius_error": r.rel_frobenius_error,
            "control_variate_error": r.control_variate_error,
            "failed": r.failed,
        })
    );
    Ok(())
}

fn concentration(ctx: &Ctx, a: ConcentrationArgs) -> Outcome {
    let cfg = ctx.experiment(&a.config)?;
    let test_function = a.test_function.as_deref().map(TestFunction::from_name).transpose()?;
    let opts = ConcentrationOptions {
        d_param: a.d_param,
        spectral: !a.no_spectral,
        ..Default::default()
    };
    let r = run_concentration_experiment_with(&cfg, &opts)?;
    write_rows(&ctx.path("concentration_trials.csv"), &r.trials)?;
    ctx.json("concentration.json", &r)?;
    println!(
        "{}",
        json!({
            "freq_e1": r.freq_e1,
            "freq_e2": r.freq_e2,
            "freq_e3": r.freq_e3,
            "median_gauge_distance": r.gauge_distance.median,
            "failed": r.failed,
        })
    );
    if let Some(g) = test_function {
        let t = run_test_function_experiment(&cfg, g, a.d_param)?;
        write_rows(&ctx.path("test_function_trials.csv"), &t.trials)?;
        ctx.json("test_function.json", &t)?;
    }
    Ok(())
}

fn limit(ctx: &Ctx, a: ConfigArgs) -> Outcome {
    let cfg: LimitConfig = io::read_config(&a.config)?;
    let r = run_deterministic_limit_experiment(&cfg)?;
    write_rows(&ctx.path("limit.csv"), &r.rows)?;
    ctx.json("limit.json", &r)?;
    println!("{}", json!({ "all_hold": r.all_hold, "lhs_monotone": r.lhs_monotone }));
    Ok(())
}

/// Writes serializable records as CSV. Nested objects become `outer_inner`
/// columns in field order, integers are written as-is, floats with 17
/// significant digits and non-finite floats as `NaN`.
fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Outcome {
    let mut headers: Option<Vec<String>> = None;
    let mut out = String::new();
    for row in rows {
        let text = serde_json::to_string(row).map_err(Error::from)?;
        let node: Node = serde_json::from_str(&text).map_err(Error::from)?;
        let mut cells = Vec::new();
        node.flatten("", &mut cells);
        let names: Vec<String> = cells.iter().map(|(k, _)| k.clone()).collect();
        match &headers {
            None => {
                out.push_str(&names.join(","));
                out.push('\n');
                headers = Some(names);
            }
            Some(h) if *h != names => return Err(Failure::invalid("Internal", "rows with differing columns")),
            Some(_) => {}
        }
        let values: Vec<String> = cells.into_iter().map(|(_, v)| v).collect();
        out.push_str(&values.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::from(e).into())
}

/// A JSON value whose object keys keep their serialized order.
enum Node {
    Leaf(String),
    Seq(Vec<Node>),
    Map(Vec<(String, Node)>),
}

impl Node {
    fn flatten(self, prefix: &str, out: &mut Vec<(String, String)>) {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}_{k}")
            }
        };
        match self {
            Node::Leaf(v) => out.push((prefix.to_string(), v)),
            Node::Seq(items) => items
                .into_iter()
                .enumerate()
                .for_each(|(i, x)| x.flatten(&key(&i.to_string()), out)),
            Node::Map(entries) => entries.into_iter().for_each(|(k, x)| x.flatten(&key(&k), out)),
        }
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Node;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON value")
            }
            fn visit_bool<E>(self, b: bool) -> std::result::Result<Node, E> {
                Ok(Node::Leaf(b.to_string()))
            }
            fn visit_u64<E>(self, n: u64) -> std::result::Result<Node, E> {
                Ok(Node::Leaf(n.to_string()))
            }
            fn visit_i64<E>(self, n: i64) -> std::result::Result<Node, E> {
                Ok(Node::Leaf(n.to_string()))
            }
            fn visit_f64<E>(self, x: f64) -> std::result::Result<Node, E> {
                Ok(Node::Leaf(fmt_f64(x)))
            }
            fn visit_str<E>(self, s: &str) -> std::result::Result<Node, E> {
                Ok(Node::Leaf(s.to_string()))
            }
            // serde_json writes non-finite floats as null.
            fn visit_unit<E>(self) -> std::result::Result<Node, E> {
                Ok(Node::Leaf("NaN".into()))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Node, A::Error> {
                let mut items = Vec::new();
                while let Some(x) = seq.next_element()? {
                    items.push(x);
                }
                Ok(Node::Seq(items))
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Node, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry()? {
                    entries.push(entry);
                }
                Ok(Node::Map(entries))
            }
        }
        d.deserialize_any(V)
    }
}
