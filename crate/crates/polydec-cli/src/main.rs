//! Command-line front end for polynomial decoupling.
//!
//! Subcommands: `tensorize` (build the coefficient/Jacobian/degree tensors),
//! `decouple` (recover a decoupled model), `verify` (check the exact
//! relations between the tensorizations), `info` (dimensions and parameter
//! counts). All I/O is newline-terminated JSON; see the README for formats.
//!
//! Exit codes: 0 success, 2 parse error (malformed or invalid input file),
//! 3 dimension mismatch between otherwise valid inputs, 4 residual above
//! the acceptance tolerance, 5 solver budget exhausted without convergence.

mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use polydec::decouple::{coupled_psym_cpd, decouple_via_j, decouple_via_q, verify_relations};
use polydec::tensorize::{build_j, build_q, build_sample_plan, build_ts, delta, rank_bound};
use polydec::{CpdOptions, DecoupleReport, Error as CoreError, PolyMap, SamplePlan};
use serde::Serialize;

use files::{
    emit, parse_json, read_input, ModelFile, ModelMetadata, PlanFile, PolyMapFile, Residuals,
    TensorFile,
};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn parse(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn dims(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::dims(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "polydec",
    version,
    about = "Decouple multivariate polynomial maps into f(u) = W·g(Vᵀu)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    /// Coefficient tensor Q (n×m×δ).
    Q,
    /// Jacobian tensor J (n×m×N); also writes the sampling plan.
    J,
    /// Degree stacks T^1..T^d (order s+1 each).
    Ts,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// CP decomposition of the Jacobian tensor.
    J,
    /// CP decomposition of the coefficient tensor.
    Q,
    /// Coupled partially-symmetric decomposition (structured).
    Coupled,
}

#[derive(Subcommand)]
enum Command {
    /// Build tensors from a polynomial map file.
    Tensorize {
        /// Polynomial map JSON file ("-" for stdin).
        input: String,
        #[arg(long, value_enum, default_value_t = Which::Q)]
        which: Which,
        /// Sampling points file (JSON with a "points" array).
        #[arg(long, conflicts_with = "sample")]
        points: Option<String>,
        /// Number of seeded standard-normal sampling points.
        #[arg(long)]
        sample: Option<usize>,
        /// Seed for sampling (default: POLYDEC_SEED or 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (default: stdout). For --which ts, the degree is
        /// inserted before the extension.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Plan output file for --which j (default: plan.json).
        #[arg(long)]
        plan_output: Option<PathBuf>,
    },
    /// Recover a decoupled model (W, V, C) from a polynomial map file.
    Decouple {
        /// Polynomial map JSON file ("-" for stdin).
        input: String,
        /// Number of branches r.
        #[arg(
            long,
            value_parser = clap::value_parser!(u64).range(1..),
            required_unless_present = "rank_sweep",
            conflicts_with = "rank_sweep"
        )]
        rank: Option<u64>,
        #[arg(long, value_enum, default_value_t = Method::Coupled)]
        method: Method,
        /// Independent solver restarts.
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        /// Seed (default: POLYDEC_SEED or 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Report fits for every rank 1..=r_max and keep the best.
        #[arg(long)]
        rank_sweep: Option<u64>,
        /// Acceptance tolerance on the map residual.
        #[arg(long, default_value_t = 1e-6)]
        accept_tol: f64,
        /// Sampling points file for --method j.
        #[arg(long, conflicts_with = "sample")]
        points: Option<String>,
        /// Number of sampling points for --method j.
        #[arg(long)]
        sample: Option<usize>,
        /// Model output file.
        #[arg(long, default_value = "model.json")]
        output: PathBuf,
        /// Report output file (written even on failure exits).
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Check the exact relations between the tensorizations, optionally
    /// against a candidate model.
    Verify {
        /// Polynomial map JSON file ("-" for stdin).
        input: String,
        /// Model JSON file to check the model-dependent residuals against.
        #[arg(long)]
        model: Option<String>,
        /// Sampling points file.
        #[arg(long, conflicts_with = "sample")]
        points: Option<String>,
        /// Number of seeded sampling points (default: the rank bound M).
        #[arg(long)]
        sample: Option<usize>,
        /// Seed (default: POLYDEC_SEED or 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print dimensions, δ, the rank bound M, and parameter counts.
    Info {
        /// Polynomial map JSON file ("-" for stdin).
        input: String,
        /// Branch count used for the decoupled parameter count.
        #[arg(long, default_value_t = 1)]
        rank: u64,
    },
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("POLYDEC_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| CliError::parse(format!("POLYDEC_SEED is not a u64: {text:?}"))),
        Err(_) => Ok(0),
    }
}

fn load_polymap(path: &str) -> Result<PolyMap<f64>, CliError> {
    let text = read_input(path)?;
    let file: PolyMapFile = parse_json(&text, "polynomial map")?;
    file.into_polymap()
}

fn load_plan(
    points: Option<&str>,
    sample: Option<usize>,
    seed: u64,
    m: usize,
    d: usize,
    default_n: usize,
) -> Result<SamplePlan<f64>, CliError> {
    if let Some(path) = points {
        let text = read_input(path)?;
        let file: PlanFile = parse_json(&text, "points")?;
        return build_sample_plan(file.points(), m, d).map_err(CliError::from);
    }
    let n_points = sample.unwrap_or(default_n);
    SamplePlan::sample(m, d, n_points, seed).map_err(CliError::from)
}

#[derive(Serialize)]
struct ReportOut {
    method: String,
    rank: usize,
    tensor_fit: f64,
    map_residual: f64,
    structure_residual: f64,
    converged: bool,
    iterations: usize,
    restarts: usize,
    seed: u64,
    accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<SweepEntry>>,
}

#[derive(Serialize)]
struct SweepEntry {
    rank: usize,
    tensor_fit: f64,
    map_residual: f64,
    structure_residual: f64,
    converged: bool,
}

#[derive(Serialize)]
struct VerifyOut {
    identity_residual: f64,
    structure_violation: f64,
    rank_a: usize,
    rank_bound: usize,
    factor_link_residual: Option<f64>,
    coefficient_residual: Option<f64>,
    jacobian_residual: Option<f64>,
    pass: bool,
}

#[derive(Serialize)]
struct InfoOut {
    m: usize,
    n: usize,
    d: usize,
    delta: usize,
    rank_bound: usize,
    rank: usize,
    coupled_parameters: u64,
    decoupled_parameters: u64,
}

fn cmd_tensorize(
    input: &str,
    which: Which,
    points: Option<&str>,
    sample: Option<usize>,
    seed: Option<u64>,
    output: Option<&Path>,
    plan_output: Option<&Path>,
) -> Result<u8, CliError> {
    let f = load_polymap(input)?;
    let seed = resolve_seed(seed)?;
    let (m, d) = (f.num_inputs(), f.degree_bound());
    match which {
        Which::Q => {
            let q = build_q(&f);
            emit(output, &TensorFile::from_tensor(&q))?;
        }
        Which::J => {
            let plan = load_plan(points, sample, seed, m, d, rank_bound(m, d))?;
            let j = build_j(&f, &plan).map_err(CliError::from)?;
            emit(output, &TensorFile::from_tensor(&j))?;
            let a = plan.matrix_a();
            let plan_file = PlanFile {
                points: plan
                    .points()
                    .iter()
                    .map(|p| p.iter().copied().collect())
                    .collect(),
                degree: Some(d),
                a: Some(
                    (0..a.nrows())
                        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
                        .collect(),
                ),
            };
            let plan_path = plan_output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("plan.json"));
            files::write_output(&plan_path, &plan_file)?;
        }
        Which::Ts => {
            for s in 1..=d {
                let t = build_ts(&f, s).map_err(CliError::from)?;
                let file = TensorFile::from_tensor(&t);
                match output {
                    Some(path) => {
                        let with_degree = degree_path(path, s);
                        files::write_output(&with_degree, &file)?;
                    }
                    None => emit(None, &file)?,
                }
            }
        }
    }
    Ok(0)
}

fn degree_path(path: &Path, s: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|x| x.to_str())
        .unwrap_or("tensor");
    let ext = path.extension().and_then(|x| x.to_str()).unwrap_or("json");
    path.with_file_name(format!("{stem}.t{s}.{ext}"))
}

fn run_method(
    f: &PolyMap<f64>,
    method: Method,
    rank: usize,
    options: &CpdOptions<f64>,
    plan: Option<&SamplePlan<f64>>,
) -> Result<DecoupleReport<f64>, CliError> {
    let report = match method {
        Method::J => {
            let plan = plan.expect("plan prepared for method j");
            decouple_via_j(f, plan, rank, options)?
        }
        Method::Q => decouple_via_q(f, rank, options)?,
        Method::Coupled => coupled_psym_cpd(f, rank, options)?,
    };
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_decouple(
    input: &str,
    rank: Option<u64>,
    method: Method,
    restarts: usize,
    seed: Option<u64>,
    rank_sweep: Option<u64>,
    accept_tol: f64,
    points: Option<&str>,
    sample: Option<usize>,
    output: &Path,
    report_path: &Path,
) -> Result<u8, CliError> {
    let f = load_polymap(input)?;
    let seed = resolve_seed(seed)?;
    let (m, d) = (f.num_inputs(), f.degree_bound());
    let options = CpdOptions {
        restarts: restarts.max(1),
        seed,
        ..CpdOptions::default()
    };
    let plan = match method {
        Method::J => Some(load_plan(
            points,
            sample,
            seed,
            m,
            d,
            rank_bound(m, d).max(d),
        )?),
        _ => None,
    };

    let ranks: Vec<usize> = match rank_sweep {
        Some(rmax) => (1..=rmax as usize).collect(),
        None => vec![rank.expect("clap requires --rank without --rank-sweep") as usize],
    };

    let mut best: Option<(usize, DecoupleReport<f64>)> = None;
    let mut sweep = Vec::new();
    for r in ranks {
        let report = run_method(&f, method, r, &options, plan.as_ref())?;
        sweep.push(SweepEntry {
            rank: r,
            tensor_fit: report.tensor_fit,
            map_residual: report.map_residual,
            structure_residual: report.structure_residual,
            converged: report.diagnostics.converged,
        });
        let better = match &best {
            None => true,
            Some((_, b)) => report.map_residual < b.map_residual,
        };
        if better {
            best = Some((r, report));
        }
    }
    let (best_rank, report) = best.expect("at least one rank runs");

    let accepted = report.map_residual <= accept_tol;
    let metadata = ModelMetadata {
        method: report.method.as_str().to_string(),
        residuals: Residuals {
            tensor_fit: report.tensor_fit,
            map_residual: report.map_residual,
            structure_residual: report.structure_residual,
        },
        seed,
    };
    files::write_output(
        output,
        &ModelFile::from_model(&report.model, Some(metadata)),
    )?;
    let out = ReportOut {
        method: report.method.as_str().to_string(),
        rank: best_rank,
        tensor_fit: report.tensor_fit,
        map_residual: report.map_residual,
        structure_residual: report.structure_residual,
        converged: report.diagnostics.converged,
        iterations: report.diagnostics.iterations,
        restarts: report.diagnostics.restarts_used,
        seed,
        accepted,
        sweep: rank_sweep.map(|_| sweep),
    };
    files::write_output(report_path, &out)?;
    emit(None, &out)?;

    if !report.diagnostics.converged {
        return Ok(5);
    }
    Ok(if accepted { 0 } else { 4 })
}

fn cmd_verify(
    input: &str,
    model: Option<&str>,
    points: Option<&str>,
    sample: Option<usize>,
    seed: Option<u64>,
) -> Result<u8, CliError> {
    let f = load_polymap(input)?;
    let seed = resolve_seed(seed)?;
    let (m, d) = (f.num_inputs(), f.degree_bound());
    let plan = load_plan(points, sample, seed, m, d, rank_bound(m, d))?;
    let model = model
        .map(|path| -> Result<_, CliError> {
            let text = read_input(path)?;
            let file: ModelFile = parse_json(&text, "model")?;
            file.into_model()
        })
        .transpose()?;
    let record = verify_relations(&f, &plan, model.as_ref())?;
    let tol = 1e-8;
    let pass = record.max_residual() <= tol;
    let out = VerifyOut {
        identity_residual: record.identity_residual,
        structure_violation: record.structure_violation,
        rank_a: record.rank_a,
        rank_bound: record.rank_bound,
        factor_link_residual: record.factor_link_residual,
        coefficient_residual: record.coefficient_residual,
        jacobian_residual: record.jacobian_residual,
        pass,
    };
    emit(None, &out)?;
    Ok(if pass { 0 } else { 4 })
}

fn cmd_info(input: &str, rank: u64) -> Result<u8, CliError> {
    let f = load_polymap(input)?;
    let (m, n, d) = (f.num_inputs(), f.num_outputs(), f.degree_bound());
    let (coupled, decoupled) = polydec::report_compression(m, n, d, rank as usize);
    let out = InfoOut {
        m,
        n,
        d,
        delta: delta(m, d),
        rank_bound: rank_bound(m, d),
        rank: rank as usize,
        coupled_parameters: coupled,
        decoupled_parameters: decoupled,
    };
    emit(None, &out)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Tensorize {
            input,
            which,
            points,
            sample,
            seed,
            output,
            plan_output,
        } => cmd_tensorize(
            &input,
            which,
            points.as_deref(),
            sample,
            seed,
            output.as_deref(),
            plan_output.as_deref(),
        ),
        Command::Decouple {
            input,
            rank,
            method,
            restarts,
            seed,
            rank_sweep,
            accept_tol,
            points,
            sample,
            output,
            report,
        } => cmd_decouple(
            &input,
            rank,
            method,
            restarts,
            seed,
            rank_sweep,
            accept_tol,
            points.as_deref(),
            sample,
            &output,
            &report,
        ),
        Command::Verify {
            input,
            model,
            points,
            sample,
            seed,
        } => cmd_verify(&input, model.as_deref(), points.as_deref(), sample, seed),
        Command::Info { input, rank } => cmd_info(&input, rank),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
