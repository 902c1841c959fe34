//! Configuration-driven experiment runner.
//!
//! ```text
//! symsde <command> --config <file> [--csv <file>] [--seed-override N]
//! ```
//!
//! Exit codes: 0 all checks pass, 1 any check fails, 2 configuration or
//! validation error. `SYMSDE_THREADS` caps the worker count without
//! changing any numeric output.

mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use config::{Command, ConfigError, ExperimentConfig};
use report::{CheckResult, RunReport};
use symsde_core::expr::VarSet;
use symsde_core::mc::{self, EstimatorResult, IbpOptions};
use symsde_core::symmetry::{
    gweak_determining_residual, reconstruct_flow, verify_finite_symmetry,
    weak_determining_residual, FlowOptions, SymmetryKind,
};
use symsde_core::ScalarField;

#[derive(Parser, Debug)]
#[command(name = "symsde", version, about = "Stochastic-transformation experiments for SDEs")]
struct Cli {
    /// verify-symmetry | verify-gweak | reconstruct-flow | quasi-invariance
    /// | ibp | stein | isserlis | simulate
    command: String,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Optional CSV export of per-term breakdowns.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Overrides sim.seed from the config.
    #[arg(long)]
    seed_override: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_cli(&cli) {
        Ok(report) => {
            for c in &report.checks {
                println!(
                    "[{}] {}: estimate {:.6e} (se {:.3e}, tol {:.3e})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.estimate,
                    c.std_error,
                    c.tolerance
                );
            }
            for d in &report.diagnostics {
                println!("note: {d}");
            }
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run_cli(cli: &Cli) -> Result<RunReport, ConfigError> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| ConfigError::new("/", format!("cannot read config: {e}")))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    let expected = serde_json::to_value(cfg.command).expect("command serializes");
    if expected != serde_json::Value::String(cli.command.clone()) {
        return Err(ConfigError::new(
            "/command",
            format!(
                "command line says `{}` but the config declares {expected}",
                cli.command
            ),
        ));
    }
    if let (Some(seed), Some(sim)) = (cli.seed_override, cfg.sim.as_mut()) {
        sim.seed = seed;
    }
    let threads = std::env::var("SYMSDE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let report = mc::with_thread_cap(threads, || run(&cfg))?;

    let json = report.to_json();
    match &cfg.output_path {
        Some(path) => {
            std::fs::write(path, &json).map_err(|e| ConfigError::new("/output_path", e))?
        }
        None => println!("{json}"),
    }
    if let Some(csv_path) = &cli.csv {
        std::fs::write(csv_path, report.to_csv())
            .map_err(|e| ConfigError::new("/", format!("cannot write csv: {e}")))?;
    }
    Ok(report)
}

/// Executes the configured command and assembles the report.
fn run(cfg: &ExperimentConfig) -> Result<RunReport, ConfigError> {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut diagnostics = Vec::new();
    let mut terms = Vec::new();

    match cfg.command {
        Command::VerifySymmetry | Command::VerifyGweak => {
            let model = cfg.build_model()?;
            let v = cfg.build_symmetry(&model)?;
            let grid = model.sample_grid(cfg.grid_points);
            let (name, residual) = match cfg.command {
                Command::VerifySymmetry => (
                    "weak determining residual sup-norm",
                    weak_determining_residual(&model, &v, &grid),
                ),
                _ => (
                    "gweak determining residual sup-norm",
                    gweak_determining_residual(&model, &v, &grid),
                ),
            };
            let residual = residual.map_err(|e| ConfigError::new("/symmetry", e))?;
            diagnostics.push(format!(
                "residual grid: {} low-discrepancy points in the working box {:?}",
                cfg.grid_points,
                model.domain_box()
            ));
            diagnostics.push(format!("worst grid point: {:?}", residual.worst_point));
            checks.push(CheckResult {
                name: name.into(),
                estimate: residual.sup_norm_on_grid,
                std_error: 0.0,
                tolerance: cfg.tolerances.residual,
                pass: residual.sup_norm_on_grid <= cfg.tolerances.residual,
            });
        }
        Command::ReconstructFlow => {
            let model = cfg.build_model()?;
            let v = cfg.build_symmetry(&model)?;
            let lambdas = cfg
                .lambdas
                .clone()
                .or_else(|| cfg.lambda.map(|l| vec![l]))
                .ok_or_else(|| ConfigError::new("/lambdas", "missing lambda(s)"))?;
            let opts = FlowOptions {
                steps: cfg.flow_steps,
                escape_box: None,
            };
            // Flow data at the requested start point.
            let start = cfg.point.clone().unwrap_or_else(|| {
                let mut p = model.initial_point().to_vec();
                p.push(0.0);
                p
            });
            let n = model.n();
            if start.len() != n + 1 {
                return Err(ConfigError::new(
                    "/point",
                    format!("needs {n} spatial coordinates plus time"),
                ));
            }
            for &lambda in &lambdas {
                let fp = reconstruct_flow(&v, lambda, &start[..n], start[n], &opts)
                    .map_err(|e| ConfigError::new("/symmetry", e))?;
                diagnostics.push(format!(
                    "lambda {lambda}: phi {:?}, f {:.6}, eta {:.6}, B {:?}, h {:?}",
                    fp.phi,
                    fp.f,
                    fp.eta,
                    fp.b.as_slice(),
                    fp.h.as_slice()
                ));
            }
            let grid = model.sample_grid(cfg.grid_points.min(32));
            let report = verify_finite_symmetry(&model, &v, &lambdas, &grid, SymmetryKind::Weak, &opts)
                .map_err(|e| ConfigError::new("/symmetry", e))?;
            for (lambda, violation) in &report.per_lambda {
                checks.push(CheckResult {
                    name: format!("finite weak criterion at lambda {lambda}"),
                    estimate: *violation,
                    std_error: 0.0,
                    tolerance: cfg.tolerances.flow,
                    pass: *violation <= cfg.tolerances.flow,
                });
            }
        }
        Command::QuasiInvariance => {
            let model = cfg.build_model()?;
            let t = cfg.build_transformation(&model)?;
            let g = cfg.observable(&model)?;
            let sim = cfg.sim()?;
            let r = mc::estimate_quasi_invariance(&model, &t, &g, cfg.t, &sim)
                .map_err(|e| ConfigError::new("/sim", e))?;
            push_mc_check(
                "quasi-invariance delta",
                &r,
                cfg,
                &mut checks,
                &mut diagnostics,
                &mut terms,
            );
        }
        Command::Ibp => {
            let model = cfg.build_model()?;
            let v = cfg.build_symmetry(&model)?;
            let f = cfg.functional(&model)?;
            let sim = cfg.sim()?;
            let r = mc::estimate_ibp(&model, &v, &f, cfg.t, &sim, &IbpOptions::default())
                .map_err(|e| ConfigError::new("/sim", e))?;
            push_mc_check(
                "integration-by-parts sum",
                &r,
                cfg,
                &mut checks,
                &mut diagnostics,
                &mut terms,
            );
        }
        Command::Stein | Command::Isserlis => {
            let vars = VarSet::spatial_and_time(&["x", "y"], "t").expect("static");
            let f_text = cfg
                .f
                .as_ref()
                .ok_or_else(|| ConfigError::new("/f", "missing functional"))?;
            let f =
                ScalarField::parse(f_text, &vars).map_err(|e| ConfigError::new("/f", e))?;
            let sim = cfg.sim()?;
            let r = match cfg.command {
                Command::Stein => mc::estimate_stein(cfg.t, &f, &sim),
                _ => mc::estimate_isserlis(cfg.t, &f, &sim),
            }
            .map_err(|e| ConfigError::new("/sim", e))?;
            let name = match cfg.command {
                Command::Stein => "stein identity difference",
                _ => "isserlis identity difference",
            };
            push_mc_check(name, &r, cfg, &mut checks, &mut diagnostics, &mut terms);
        }
        Command::Simulate => {
            let model = cfg.build_model()?;
            let sim = cfg.sim()?;
            let ens = mc::simulate(&model, &sim).map_err(|e| ConfigError::new("/sim", e))?;
            let k = ens.n_steps();
            let total = (ens.n_paths() * k * ens.m) as f64;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for p in 0..ens.n_paths() {
                let view = ens.path(p);
                for step in 0..k {
                    for &w in view.increment(step) {
                        sum += w;
                        sum_sq += w * w;
                    }
                }
            }
            let mean_z = (sum / total) / (sim.dt / total).sqrt();
            let var_z = (sum_sq / total / sim.dt - 1.0) / (2.0 / total).sqrt();
            // Increment diagnostics: mean ~ 0 and variance ~ dt.
            checks.push(CheckResult {
                name: "increment mean (standardized)".into(),
                estimate: mean_z,
                std_error: 1.0,
                tolerance: 6.0,
                pass: mean_z.abs() <= 6.0,
            });
            checks.push(CheckResult {
                name: "increment variance ratio (standardized)".into(),
                estimate: var_z,
                std_error: 1.0,
                tolerance: 6.0,
                pass: var_z.abs() <= 6.0,
            });
            diagnostics.push(format!(
                "simulated {} paths of {} steps at dt {}",
                ens.n_paths(),
                k,
                sim.dt
            ));
            if let Some(path) = &cfg.dump_path {
                mc::write_ensemble(std::path::Path::new(path), &ens)
                    .map_err(|e| ConfigError::new("/dump_path", e))?;
                diagnostics.push(format!("ensemble written to {path}"));
            }
        }
    }

    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: serde_json::to_value(cfg.command)
            .expect("command serializes")
            .as_str()
            .expect("string")
            .to_string(),
        config: cfg.clone(),
        checks,
        diagnostics,
        terms,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

fn push_mc_check(
    name: &str,
    r: &EstimatorResult,
    cfg: &ExperimentConfig,
    checks: &mut Vec<CheckResult>,
    diagnostics: &mut Vec<String>,
    terms: &mut Vec<(String, f64)>,
) {
    let tol = cfg.tolerances.se_multiplier * r.std_error + cfg.tolerances.mc_slack;
    checks.push(CheckResult {
        name: name.into(),
        estimate: r.estimate,
        std_error: r.std_error,
        tolerance: tol,
        pass: r.estimate.abs() <= tol,
    });
    diagnostics.extend(r.diagnostics.iter().cloned());
    diagnostics.push(format!("effective sample size {:.1}", r.n_effective));
    terms.extend(r.terms.iter().cloned());
}
