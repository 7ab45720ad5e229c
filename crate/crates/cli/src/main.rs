//! `sbridge`: runs the scaling, stability and spectral experiments and writes
//! their artifacts.
//!
//! Artifacts go to `--out`, else `$SB_OUTPUT_DIR`, else the working directory.
//! Config files are JSON objects carrying `"schema_version": 1`; unknown
//! fields are rejected. The schemas are:
//!
//! - experiment (`constants`, `dyson`, `esd`, `concentration`):
//!   `{m, n, margin, mean, dist, seed?, trials?}` with
//!   `margin = {"kind": "uniform", fraction} | {"kind": "row_block", lo, hi, split}`,
//!   `mean = {"kind": "homogeneous", lambda} | {"kind": "row_block", lo, hi, split}`,
//!   `dist ∈ {poisson, bernoulli, exponential, uniform}`;
//! - `clt`: `{m, n, mean_lo, mean_hi, dist, sample_size, replicates, seed?}`;
//! - `limit`: `{family: "constant" | "linear_ramp", levels?, reference_level?}`.
//!
//! The seed is `--seed` when given, else the config's `seed`, else 0.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 for a numerical
//! failure. Failures print `{"kind": ..., "message": ...}` to stderr; a Dyson
//! solve that stalls still writes its partial artifacts before exiting with 2.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sbridge::Error;

#[derive(Parser, Debug)]
#[command(
    name = "sbridge",
    version,
    about = "Sinkhorn scaling, stability bounds and spectral experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory.
    #[arg(long, global = true, env = "SB_OUTPUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Seed of every random draw; overrides the config's seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Monte Carlo commands default to all cores, the rest to 1.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scale a matrix to prescribed margins; writes potentials.json and rescaled.csv.
    Scale(ScaleArgs),
    /// Decide scalability; writes check.json with a 1-based witness (I, J).
    Check(CheckArgs),
    /// Evaluate the stability and concentration constants of an experiment.
    Constants(ConstantsArgs),
    /// Random inequality suites; writes <suite>_sweep.csv and <suite>_sweep.json.
    StabilitySweep(SweepArgs),
    /// Solve the Dyson equation for an experiment's variance profile.
    Dyson(DysonArgs),
    /// Empirical spectrum against the Dyson prediction, with rigidity.
    Esd(EsdArgs),
    /// Monte Carlo check of the potential covariance.
    Clt(ConfigArgs),
    /// Concentration events over independent trials.
    Concentration(ConcentrationArgs),
    /// Dyadic discretizations of a limit family against the Hellinger bound.
    Limit(ConfigArgs),
}

#[derive(Args, Debug)]
struct ScaleArgs {
    /// Matrix CSV: a header line `m,n` followed by m rows.
    #[arg(long)]
    matrix: PathBuf,
    /// Margins JSON `{"r": [...], "c": [...]}`.
    #[arg(long)]
    margins: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = GaugeArg::BetaC)]
    gauge: GaugeArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GaugeArg {
    BetaC,
    MaxEqualized,
    KernelOrthogonal,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    margins: PathBuf,
    /// Exhaustive subset search even for strictly positive matrices.
    #[arg(long)]
    exact: bool,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct ConstantsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Confidence parameter D.
    #[arg(long = "d", default_value_t = 1.0)]
    d_param: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Stability,
    Potential,
    Sandwich,
    PotentialBound,
    Scalability,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = Suite::Stability)]
    suite: Suite,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Shape of the 0/1 patterns in the scalability suite.
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    n: usize,
}

#[derive(Args, Debug, Clone)]
struct DysonOverrides {
    /// Number of energies on the uniform grid (0, hi].
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    grid_hi: Option<f64>,
    /// Comma-separated decreasing η values.
    #[arg(long, value_delimiter = ',')]
    eta_ladder: Option<Vec<f64>>,
    /// Fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Fixed-point iterations per energy and rung.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Fluctuation normalization d = max(m, n) or d = m + n.
    #[arg(long, value_enum, default_value_t = ScaleArg::MaxDim)]
    scale: ScaleArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    MaxDim,
    SumDims,
}

#[derive(Args, Debug)]
struct DysonArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    dyson: DysonOverrides,
}

#[derive(Args, Debug)]
struct EsdArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    dyson: DysonOverrides,
    #[arg(long, default_value_t = 40)]
    bins: usize,
    #[arg(long = "d", default_value_t = 1.0)]
    d_param: f64,
}

#[derive(Args, Debug)]
struct ConcentrationArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "d", default_value_t = 1.0)]
    d_param: f64,
    /// Also run the test-function approximation for this function
    /// (constant, coordinate_x, coordinate_y, product_xy, cosine_bump).
    #[arg(long)]
    test_function: Option<String>,
    /// Skip the spectral norm of X − Λ (E₂ is then not evaluated).
    #[arg(long)]
    no_spectral: bool,
}

/// A failure reported on stderr, with its exit status.
#[derive(Debug)]
pub struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl Failure {
    fn invalid(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            code: 1,
        }
    }

    fn numeric(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            code: 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            code: if e.is_numeric() { 2 } else { 1 },
        }
    }
}

fn fail(f: Failure) -> ExitCode {
    let obj = serde_json::json!({ "kind": f.kind, "message": f.message });
    eprintln!("{obj}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::invalid("Usage", e.render().to_string().trim_end())),
    };
    let monte_carlo = matches!(
        cli.command,
        Command::StabilitySweep(_) | Command::Dyson(_) | Command::Esd(_) | Command::Clt(_) | Command::Concentration(_)
    );
    let workers = cli.common.workers.unwrap_or(if monte_carlo { 0 } else { 1 });
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        return fail(Failure::invalid("Workers", e.to_string()));
    }
    if let Err(e) = std::fs::create_dir_all(&cli.common.out) {
        return fail(Failure::invalid(
            "OutputDir",
            format!("{}: {e}", cli.common.out.display()),
        ));
    }
    match commands::run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
