//! Declarative experiment runner: a JSON config names a command, a model
//! instance and numerical parameters; every run emits its outputs plus a
//! manifest with content hashes into `output_dir`.

use clap::Parser;
use kimura_mfg::coupling::{coupling_sweep, CouplingModel};
use kimura_mfg::io::{sha256_file, write_bundle_csv, write_field_csv, write_json};
use kimura_mfg::master::{solve_master, MasterConfig};
use kimura_mfg::mfg::{simulate_equilibrium, verify_value, zero_noise_equilibria};
use kimura_mfg::model::{CostFamily, ZeroFeedback};
use kimura_mfg::particle::{moment_diagnostics, IdiosyncraticStream, MeanFieldRateFunction, ParticleEnsemble};
use kimura_mfg::pde::{solve_linear, FieldOnGrid, LinearKimuraProblem};
use kimura_mfg::sde::{exp_moment_estimate, simulate, SchemeConfig};
use kimura_mfg::simplex::{build_grid, SimplexPoint};
use kimura_mfg::{Error, ModelSpec};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

const COMMANDS: [&str; 9] = [
    "solve-master",
    "simulate-mfg",
    "verify-value",
    "zero-noise",
    "linear-kimura",
    "coupling",
    "particle",
    "exp-moment",
    "diagnostics",
];

#[derive(Parser)]
#[command(name = "kimura-mfg", about = "Wright–Fisher mean field game laboratory")]
struct Cli {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker parallelism (falls back to KIMURA_MFG_THREADS, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Run the registered acceptance case for the command instead of the full run
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Numerics {
    grid_n: usize,
    dt_pde: f64,
    dt_sde: f64,
    n_paths: usize,
    picard_tol: f64,
}

fn default_check_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentConfig {
    command: String,
    model: ModelSpec,
    numerics: Numerics,
    seed: u64,
    output_dir: PathBuf,
    /// Tolerance applied by --check; the default suits the registered cases.
    #[serde(default = "default_check_tol")]
    check_tol: f64,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a ExperimentConfig,
    version: &'static str,
    wall_time_s: f64,
    outputs: Vec<ManifestEntry>,
}

/// 2: config/validation problem, 3: numerical failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::UnsupportedDimension(_) | Error::Json(_) | Error::Io(_) => 2,
        Error::BoundaryGuard { .. } | Error::CflViolation { .. } | Error::PicardNonConvergence { .. } => 3,
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let raw = match std::fs::read_to_string(&cli.config) {
        Ok(raw) => raw,
        Err(e) => return fail(2, format!("cannot read {}: {e}", cli.config.display())),
    };
    let mut config: ExperimentConfig = match serde_json::from_str(&raw) {
        Ok(c) => c,
        Err(e) => return fail(2, format!("config parse error: {e}")),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let threads = cli.threads.or_else(|| {
        std::env::var("KIMURA_MFG_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // the pool can only be installed once; a second attempt is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = validate(&config) {
        return fail(2, e);
    }
    if let Err(e) = std::fs::create_dir_all(&config.output_dir) {
        return fail(2, format!("cannot create {}: {e}", config.output_dir.display()));
    }
    let start = Instant::now();
    let result = if cli.check { run_check(&config) } else { run(&config) };
    match result {
        Ok(outputs) => match write_manifest(&config, start.elapsed().as_secs_f64(), &outputs) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(2, e),
        },
        Err(RunError::Core(e)) => fail(exit_code(&e), e),
        Err(RunError::CheckFailed(msg)) => fail(4, msg),
    }
}

enum RunError {
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Core(e)
    }
}

fn validate(config: &ExperimentConfig) -> Result<(), String> {
    if !COMMANDS.contains(&config.command.as_str()) {
        return Err(format!(
            "unknown command `{}` (expected one of {})",
            config.command,
            COMMANDS.join(", ")
        ));
    }
    let n = &config.numerics;
    if n.grid_n == 0 || n.n_paths == 0 {
        return Err("grid_n and n_paths must be positive".into());
    }
    if !(n.dt_pde > 0.0 && n.dt_sde > 0.0 && n.picard_tol > 0.0) {
        return Err("dt_pde, dt_sde and picard_tol must be positive".into());
    }
    config.model.validate().map_err(|e| e.to_string())?;
    Ok(())
}

fn write_manifest(
    config: &ExperimentConfig,
    wall_time_s: f64,
    outputs: &[PathBuf],
) -> Result<(), Error> {
    let mut entries = Vec::with_capacity(outputs.len());
    for path in outputs {
        entries.push(ManifestEntry {
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_file(path)?,
        });
    }
    let manifest = RunManifest {
        config,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_s,
        outputs: entries,
    };
    write_json(&config.output_dir.join("manifest.json"), &manifest)
}

fn master_config(config: &ExperimentConfig) -> MasterConfig {
    let mut cfg = MasterConfig::new(config.numerics.dt_pde);
    cfg.picard_tol = config.numerics.picard_tol;
    cfg
}

fn sde_config(config: &ExperimentConfig) -> SchemeConfig {
    let steps = (config.model.horizon / config.numerics.dt_sde).round().max(1.0) as usize;
    SchemeConfig::with_stride(config.numerics.dt_sde, (steps / 50).max(1))
}

fn run(config: &ExperimentConfig) -> Result<Vec<PathBuf>, RunError> {
    let spec = &config.model;
    let out = |name: &str| config.output_dir.join(name);
    let mut outputs = Vec::new();
    match config.command.as_str() {
        "solve-master" => {
            let grid = build_grid(spec.d, config.numerics.grid_n)?;
            let sol = solve_master(spec, &grid, &master_config(config))?;
            for i in 0..spec.d {
                let field = FieldOnGrid {
                    times: sol.times.clone(),
                    values: sol.values.iter().map(|slice| slice[i].clone()).collect(),
                };
                let path = out(&format!("u_state_{i}.csv"));
                write_field_csv(&path, &field, &grid)?;
                outputs.push(path);
            }
            let path = out("picard.json");
            write_json(
                &path,
                &serde_json::json!({
                    "iters": sol.picard_iters,
                    "residuals": sol.picard_residuals,
                }),
            )?;
            outputs.push(path);
        }
        "simulate-mfg" => {
            let grid = build_grid(spec.d, config.numerics.grid_n)?;
            let sol = Arc::new(solve_master(spec, &grid, &master_config(config))?);
            let p0 = SimplexPoint::barycenter(spec.d);
            let eq = simulate_equilibrium(
                sol,
                &p0,
                config.numerics.n_paths,
                &sde_config(config),
                config.seed,
            )?;
            let path = out("paths.csv");
            write_bundle_csv(&path, &eq.bundle)?;
            outputs.push(path);
        }
        "verify-value" => {
            let grid = build_grid(spec.d, config.numerics.grid_n)?;
            let sol = Arc::new(solve_master(spec, &grid, &master_config(config))?);
            let p0 = SimplexPoint::barycenter(spec.d);
            let (estimate, std_err, u0, z) = verify_value(
                sol,
                &p0,
                0,
                config.numerics.n_paths,
                &sde_config(config),
                config.seed,
            )?;
            let path = out("verify.json");
            write_json(
                &path,
                &serde_json::json!({
                    "estimate": estimate, "std_err": std_err, "u0": u0, "z": z,
                }),
            )?;
            outputs.push(path);
        }
        "zero-noise" => {
            let p0 = SimplexPoint::barycenter(2);
            let guesses: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
            let equilibria = zero_noise_equilibria(
                spec,
                &p0,
                &guesses,
                config.numerics.dt_pde,
                config.numerics.picard_tol,
                2000,
            )?;
            let summary: Vec<_> = equilibria
                .iter()
                .map(|eq| {
                    serde_json::json!({
                        "guess": eq.guess,
                        "residual": eq.residual,
                        "p1_terminal": eq.flow.last().map(|p| p.get(0)),
                    })
                })
                .collect();
            let path = out("equilibria.json");
            write_json(&path, &serde_json::json!({"count": equilibria.len(), "equilibria": summary}))?;
            outputs.push(path);
        }
        "linear-kimura" => {
            let grid = build_grid(spec.d, config.numerics.grid_n)?;
            let problem = LinearKimuraProblem::pure_wf(
                spec.epsilon,
                spec.horizon,
                Arc::new(|p: &SimplexPoint| p.get(0)),
            );
            let sol = solve_linear(&problem, &grid, config.numerics.dt_pde)?;
            let path = out("linear_kimura.csv");
            write_field_csv(&path, &sol, &grid)?;
            outputs.push(path);
        }
        "coupling" => {
            let model = CouplingModel::forced(spec.clone());
            let gaps: Vec<f64> = (0..5).map(|k| 0.02 / 2f64.powi(k)).collect();
            let block = vec![1.0 / (spec.d - 1) as f64; spec.d - 1];
            let (points, exponent) = coupling_sweep(
                &model,
                1,
                &[0.2],
                &block,
                &gaps,
                config.numerics.dt_sde,
                config.numerics.n_paths,
                config.seed,
            )?;
            let rows: Vec<_> = points
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "gap": p.gap,
                        "failure_prob": p.failure_prob,
                        "std_err": p.std_err,
                        "n_paths": p.n_paths,
                    })
                })
                .collect();
            let path = out("coupling.json");
            write_json(&path, &serde_json::json!({"points": rows, "decay_exponent": exponent}))?;
            outputs.push(path);
        }
        "particle" => {
            let idio = IdiosyncraticStream::new(config.seed);
            let mu0 = SimplexPoint::barycenter(spec.d);
            let ens = ParticleEnsemble::init(spec.d, config.numerics.grid_n, &mu0, &idio)?;
            let rate = MeanFieldRateFunction::unit(spec.d);
            let report = moment_diagnostics(
                &ens,
                &rate,
                spec.epsilon,
                config.numerics.n_paths,
                config.seed,
            )?;
            let path = out("particle.json");
            write_json(
                &path,
                &serde_json::json!({
                    "mean_z": report.mean_z,
                    "cov_z": report.cov_z,
                    "max_mean_z": report.max_mean_z,
                    "max_cov_z": report.max_cov_z,
                }),
            )?;
            outputs.push(path);
        }
        "exp-moment" => {
            let p0 = SimplexPoint::barycenter(spec.d);
            let bundle = simulate(
                spec,
                &ZeroFeedback,
                None,
                &p0,
                config.numerics.n_paths,
                &SchemeConfig::new(config.numerics.dt_sde),
                config.seed,
            )?;
            let est = exp_moment_estimate(&bundle, 1.0, spec)?;
            let path = out("exp_moment.json");
            write_json(
                &path,
                &serde_json::json!({
                    "lambda": 1.0,
                    "gamma": est.gamma,
                    "in_regime": est.in_regime,
                    "per_state": est.per_state,
                }),
            )?;
            outputs.push(path);
        }
        "diagnostics" => {
            let regime = spec.kappa_regime();
            let path = out("diagnostics.json");
            write_json(
                &path,
                &serde_json::json!({
                    "model": spec,
                    "kappa_regime": regime,
                    "threads": rayon::current_num_threads(),
                }),
            )?;
            outputs.push(path);
        }
        other => return Err(RunError::Core(Error::invalid(format!("unknown command {other}")))),
    }
    Ok(outputs)
}

/// Registered --check cases, run at reduced scale against `check_tol`.
fn run_check(config: &ExperimentConfig) -> Result<Vec<PathBuf>, RunError> {
    let (case, measured) = match config.command.as_str() {
        "solve-master" => {
            // constant-cost exactness: U must equal the terminal constant
            let c = 0.3;
            let spec = ModelSpec {
                d: 2,
                epsilon: 0.5,
                kappa: 1.0,
                delta: 0.05,
                horizon: 0.5,
                f: CostFamily::zero(),
                g: CostFamily::Constant { c },
            };
            let grid = build_grid(2, 40)?;
            let sol = solve_master(&spec, &grid, &MasterConfig::new(1e-3))?;
            let err = sol
                .values
                .iter()
                .flatten()
                .flatten()
                .map(|v| (v - c).abs())
                .fold(0.0f64, f64::max);
            ("constant-cost", err)
        }
        "linear-kimura" => {
            // quadratic-moment oracle p + (p^2 - p) e^{-eps^2 (T - t)}
            let (eps, horizon) = (0.5, 1.0);
            let grid = build_grid(2, 50)?;
            let problem = LinearKimuraProblem::pure_wf(
                eps,
                horizon,
                Arc::new(|p: &SimplexPoint| p.get(0) * p.get(0)),
            );
            let sol = solve_linear(&problem, &grid, 4e-3)?;
            let mut err = 0.0f64;
            for (m, &t) in sol.times.iter().enumerate() {
                for (id, &v) in sol.values[m].iter().enumerate() {
                    let p = grid.node(id).get(0);
                    let exact = p + (p * p - p) * (-eps * eps * (horizon - t)).exp();
                    err = err.max((v - exact).abs());
                }
            }
            ("quadratic-moment", err)
        }
        other => {
            return Err(RunError::Core(Error::invalid(format!(
                "no registered acceptance case for command `{other}`"
            ))))
        }
    };
    let pass = measured <= config.check_tol;
    println!(
        "{:<18} {:<12.3e} {:<12.1e} {}",
        case,
        measured,
        config.check_tol,
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        return Err(RunError::CheckFailed(format!(
            "check case `{case}`: measured {measured:.3e} exceeds tolerance {:.1e}",
            config.check_tol
        )));
    }
    let path = config.output_dir.join("check.json");
    write_json(
        &path,
        &serde_json::json!({"case": case, "measured": measured, "tolerance": config.check_tol}),
    )?;
    Ok(vec![path])
}
