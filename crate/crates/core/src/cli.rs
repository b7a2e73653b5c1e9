//! The `covest` command-line tool.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 numerical failure,
//! 4 a Monte-Carlo assertion in a simulation report failed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, nested_model_family, BasisFamily, DesignMatrix, ModelSpec};
use crate::config::{
    self, base_dir, model_specs, resolve, EstimateConfig, EvalConfig, ExperimentConfig,
    SelectConfig, SimulateConfig,
};
use crate::error::{Error, Result};
use crate::estimator::{eval_psi, fit_model, sample_second_moment_with, FitDiagnostics, ObservationSet};
use crate::exec::{with_threads, Execution};
use crate::io::{fmt_f64, read_pairs, read_points, read_table, table_csv, to_json_pretty, write_file, write_matrix};
use crate::linalg::{to_rows, SymMatrix};
use crate::selection::{select_with, PenaltyMode, SelectOptions, SelectionRow};
use crate::simlab::{
    concentration_check, kl_rate_exponent, oracle_inequality_check, phi_check, rate_check,
    risk_decomposition_check, ConcentrationSetup, ProcessKind, RateSetup, TrueProcessSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "covest", version, about = "Covariance function estimation with penalized model selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model and write Ψ̂, Σ̂ and a result bundle.
    Estimate(CommonArgs),
    /// Fit a collection of models and pick one by penalized contrast.
    Select(CommonArgs),
    /// Run a Monte-Carlo experiment and write its report.
    Simulate(CommonArgs),
    /// Evaluate a fitted covariance function at (s, t) pairs.
    Eval(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Subtract the sample mean before estimating.
    #[arg(long)]
    center: bool,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

enum Outcome {
    Done,
    AssertionFailed,
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let (args, f): (&CommonArgs, fn(&CommonArgs) -> Result<Outcome>) = match &cli.command {
        Command::Estimate(a) => (a, cmd_estimate),
        Command::Select(a) => (a, cmd_select),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Eval(a) => (a, cmd_eval),
    };
    match with_threads(args.threads.unwrap_or(0), || f(args)) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::AssertionFailed) => {
            eprintln!("covest: one or more Monte-Carlo assertions failed; see report.json");
            EXIT_ASSERTION
        }
        Err(e) => {
            eprintln!("covest: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_INPUT
            }
        }
    }
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn load_observations(
    data: &Path,
    points: &Path,
    n_points: Option<usize>,
    n_samples: Option<usize>,
    center: bool,
) -> Result<ObservationSet> {
    let pts = read_points(points)?;
    if let Some(n) = n_points {
        if n != pts.len() {
            return Err(Error::invalid(format!(
                "config declares {n} points but {} has {}",
                points.display(),
                pts.len()
            )));
        }
    }
    let rows = read_table(data, Some(pts.len()))?;
    if let Some(big_n) = n_samples {
        if big_n != rows.len() {
            return Err(Error::invalid(format!(
                "config declares {big_n} replications but {} has {}",
                data.display(),
                rows.len()
            )));
        }
    }
    let obs = ObservationSet::from_rows(pts, &rows)?;
    Ok(if center { obs.centered() } else { obs })
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

#[derive(Debug, Serialize)]
struct SelectionSummary<'a> {
    theta: f64,
    penalty_mode: PenaltyMode,
    chosen_model_id: &'a str,
    tie_broken: bool,
    degenerate: bool,
    lambda_max_phi: Option<f64>,
    lambda_bound_violations: Vec<&'a str>,
    table: &'a [SelectionRow],
}

#[derive(Debug, Serialize)]
struct ResultBundle<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    timestamp_unix: u64,
    config: &'a C,
    n_points: usize,
    n_samples: usize,
    centered: bool,
    basis: &'a BasisFamily,
    model: &'a ModelSpec,
    psi_hat: Vec<Vec<f64>>,
    sigma_hat: Vec<Vec<f64>>,
    xbar: Vec<f64>,
    diagnostics: FitDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<SelectionSummary<'a>>,
}

/// The part of a result bundle needed to evaluate `σ̂(s, t)`.
#[derive(Debug, Deserialize)]
struct FittedModel {
    basis: BasisFamily,
    model: ModelSpec,
    psi_hat: Vec<Vec<f64>>,
}

fn cmd_estimate(args: &CommonArgs) -> Result<Outcome> {
    let base = base_dir(&args.config)?;
    let mut cfg: EstimateConfig = config::load(&args.config)?;
    cfg.data = resolve(&base, &cfg.data);
    cfg.points = resolve(&base, &cfg.points);
    cfg.output_dir = resolve(&base, &cfg.output_dir);
    cfg.center |= args.center;
    cfg.basis.validate()?;

    let obs = load_observations(&cfg.data, &cfg.points, cfg.n_points, cfg.n_samples, cfg.center)?;
    let model = config::model_specs(std::slice::from_ref(&cfg.model))?.remove(0);
    let design = design_matrix(&cfg.basis, &model, obs.points())?;
    let moments = sample_second_moment_with(&obs, Execution::default());
    let fit = fit_model(&moments, &design)?;
    log::info!("model {} fitted with rank {}", model.model_id, fit.diagnostics.rank);

    prepare_output(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    write_matrix(&out.join("psi_hat.csv"), fit.psi_hat.as_matrix())?;
    write_matrix(&out.join("sigma_hat.csv"), fit.sigma_hat.as_matrix())?;
    let bundle = ResultBundle {
        tool: "covest",
        version: env!("CARGO_PKG_VERSION"),
        command: "estimate",
        timestamp_unix: timestamp(),
        config: &cfg,
        n_points: obs.n_points(),
        n_samples: obs.n_samples(),
        centered: obs.is_centered(),
        basis: &cfg.basis,
        model: &fit.model,
        psi_hat: to_rows(fit.psi_hat.as_matrix()),
        sigma_hat: to_rows(fit.sigma_hat.as_matrix()),
        xbar: moments.xbar.iter().copied().collect(),
        diagnostics: fit.diagnostics,
        selection: None,
    };
    write_file(&out.join("result.json"), &to_json_pretty(&bundle)?)?;
    write_file(&out.join("config_echo.json"), &to_json_pretty(&cfg)?)?;
    Ok(Outcome::Done)
}

fn selection_table_csv(rows: &[SelectionRow]) -> String {
    let mut out = String::from("model_id,m,D_m,delta_sq,contrast,pen,criterion,chosen\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model_id,
            r.m,
            fmt_f64(r.d_m),
            fmt_f64(r.delta_sq),
            fmt_f64(r.contrast),
            fmt_f64(r.pen),
            fmt_f64(r.criterion),
            r.chosen
        ));
    }
    out
}

fn cmd_select(args: &CommonArgs) -> Result<Outcome> {
    let base = base_dir(&args.config)?;
    let mut cfg: SelectConfig = config::load(&args.config)?;
    cfg.data = resolve(&base, &cfg.data);
    cfg.points = resolve(&base, &cfg.points);
    cfg.output_dir = resolve(&base, &cfg.output_dir);
    cfg.center |= args.center;
    cfg.basis.validate()?;
    if !(cfg.theta > 0.0) {
        return Err(Error::invalid(format!("theta must be positive, got {}", cfg.theta)));
    }

    let obs = load_observations(&cfg.data, &cfg.points, cfg.n_points, cfg.n_samples, cfg.center)?;
    let models = model_specs(&cfg.models)?;
    let designs: Vec<DesignMatrix> = models
        .iter()
        .map(|m| design_matrix(&cfg.basis, m, obs.points()))
        .collect::<Result<_>>()?;
    let opts = SelectOptions {
        theta: cfg.theta,
        mode: cfg.penalty_mode,
    };
    let exec = Execution::default();
    let res = select_with(&obs, &designs, opts, exec)?;
    let violations = res.lambda_bound_violations();
    if !violations.is_empty() {
        log::info!("delta_sq exceeds lambda_max(Phi) for models {violations:?}");
    }
    let moments = sample_second_moment_with(&obs, exec);

    prepare_output(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    let fit = &res.estimate;
    write_matrix(&out.join("psi_hat.csv"), fit.psi_hat.as_matrix())?;
    write_matrix(&out.join("sigma_hat.csv"), fit.sigma_hat.as_matrix())?;
    write_file(&out.join("selection_table.csv"), &selection_table_csv(&res.rows))?;
    let bundle = ResultBundle {
        tool: "covest",
        version: env!("CARGO_PKG_VERSION"),
        command: "select",
        timestamp_unix: timestamp(),
        config: &cfg,
        n_points: obs.n_points(),
        n_samples: obs.n_samples(),
        centered: obs.is_centered(),
        basis: &cfg.basis,
        model: &fit.model,
        psi_hat: to_rows(fit.psi_hat.as_matrix()),
        sigma_hat: to_rows(fit.sigma_hat.as_matrix()),
        xbar: moments.xbar.iter().copied().collect(),
        diagnostics: fit.diagnostics,
        selection: Some(SelectionSummary {
            theta: res.theta,
            penalty_mode: res.mode,
            chosen_model_id: &res.chosen_row().model_id,
            tie_broken: res.tie_broken,
            degenerate: res.degenerate,
            lambda_max_phi: res.lambda_max_phi,
            lambda_bound_violations: violations,
            table: &res.rows,
        }),
    };
    write_file(&out.join("result.json"), &to_json_pretty(&bundle)?)?;
    write_file(&out.join("config_echo.json"), &to_json_pretty(&cfg)?)?;
    Ok(Outcome::Done)
}

fn cmd_eval(args: &CommonArgs) -> Result<Outcome> {
    let base = base_dir(&args.config)?;
    let mut cfg: EvalConfig = config::load(&args.config)?;
    cfg.result = resolve(&base, &cfg.result);
    cfg.pairs = resolve(&base, &cfg.pairs);
    cfg.output = resolve(&base, &cfg.output);
    let text = fs::read_to_string(&cfg.result)
        .map_err(|e| Error::Parse(format!("{}: {e}", cfg.result.display())))?;
    let fitted: FittedModel = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", cfg.result.display())))?;
    fitted.basis.validate()?;
    fitted.model.validate(&fitted.basis)?;
    let psi = SymMatrix::from_rows(&fitted.psi_hat)?;
    let pairs = read_pairs(&cfg.pairs)?;
    let mut out = String::from("s,t,sigma_hat\n");
    for (k, &(s, t)) in pairs.iter().enumerate() {
        let v = eval_psi(&fitted.basis, &fitted.model, &psi, s, t).map_err(|e| match e {
            Error::OutsideDomain(msg) => Error::OutsideDomain(format!("pair {}: {msg}", k + 1)),
            other => other,
        })?;
        out.push_str(&format!("{},{},{}\n", fmt_f64(s), fmt_f64(t), fmt_f64(v)));
    }
    if let Some(parent) = cfg.output.parent() {
        prepare_output(parent)?;
    }
    write_file(&cfg.output, &out)?;
    Ok(Outcome::Done)
}

#[derive(Debug, Serialize)]
struct SimulationReport<'a, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    seed: u64,
    pass: bool,
    report: &'a R,
}

fn designs_for(family: &BasisFamily, sizes: &[usize], points: &[f64]) -> Result<Vec<DesignMatrix>> {
    nested_model_family(family, sizes)?
        .iter()
        .map(|m| design_matrix(family, m, points))
        .collect()
}

fn write_report<R: Serialize>(out: &Path, name: &'static str, seed: u64, pass: bool, report: &R) -> Result<()> {
    let doc = SimulationReport {
        tool: "covest",
        version: env!("CARGO_PKG_VERSION"),
        experiment: name,
        seed,
        pass,
        report,
    };
    write_file(&out.join("report.json"), &to_json_pretty(&doc)?)
}

const PLOT_HEADER: [&str; 4] = ["x", "empirical", "target", "se"];

fn cmd_simulate(args: &CommonArgs) -> Result<Outcome> {
    let base = base_dir(&args.config)?;
    let mut cfg: SimulateConfig = config::load(&args.config)?;
    cfg.output_dir = resolve(&base, &cfg.output_dir);
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exec = Execution::default();
    let out = cfg.output_dir.clone();
    let seed = cfg.seed;
    let name = cfg.experiment.name();

    let pass = match &cfg.experiment {
        ExperimentConfig::RiskDecomposition {
            process,
            points,
            basis,
            sizes,
            n_samples,
            replications,
            phi_check_samples,
        } => {
            let pts = points.resolve(basis)?;
            let spec = TrueProcessSpec {
                process: process.clone(),
                rng_seed: seed,
            };
            let designs = designs_for(basis, sizes, &pts)?;
            let check = phi_check_samples
                .map(|big| phi_check(&spec, &pts, big, u64::MAX, exec))
                .transpose()?;
            let report = risk_decomposition_check(&spec, &designs, *n_samples, *replications, exec)?;
            let pass = report.all_pass && check.as_ref().is_none_or(|c| c.pass);
            #[derive(Serialize)]
            struct Combined<'a> {
                phi_check: Option<&'a crate::simlab::PhiCheck>,
                risk: &'a crate::simlab::RiskReport,
            }
            prepare_output(&out)?;
            write_report(
                &out,
                name,
                seed,
                pass,
                &Combined {
                    phi_check: check.as_ref(),
                    risk: &report,
                },
            )?;
            let risk_rows: Vec<Vec<f64>> = report
                .rows
                .iter()
                .map(|r| vec![r.m as f64, r.mc_risk, r.predicted_risk, r.mc_se])
                .collect();
            write_file(&out.join("plotdata_risk.csv"), &table_csv(&PLOT_HEADER, &risk_rows))?;
            let var_rows: Vec<Vec<f64>> = report
                .rows
                .iter()
                .map(|r| vec![r.m as f64, r.scaled_variance_trace, r.kron_trace, r.scaled_variance_se])
                .collect();
            write_file(&out.join("plotdata_variance.csv"), &table_csv(&PLOT_HEADER, &var_rows))?;
            pass
        }
        ExperimentConfig::Oracle {
            process,
            points,
            basis,
            sizes,
            thetas,
            n_samples,
            replications,
        } => {
            let pts = points.resolve(basis)?;
            let spec = TrueProcessSpec {
                process: process.clone(),
                rng_seed: seed,
            };
            let designs = designs_for(basis, sizes, &pts)?;
            let report = oracle_inequality_check(&spec, &designs, thetas, *n_samples, *replications, exec)?;
            prepare_output(&out)?;
            write_report(&out, name, seed, report.all_pass, &report)?;
            let rows: Vec<Vec<f64>> = report
                .rows
                .iter()
                .map(|r| vec![r.theta, r.selected_risk, r.k_theta * r.best_model_risk, r.selected_se])
                .collect();
            write_file(&out.join("plotdata_oracle.csv"), &table_csv(&PLOT_HEADER, &rows))?;
            report.all_pass
        }
        ExperimentConfig::Rate {
            process,
            points,
            basis,
            sizes,
            ns,
            replications,
            theta,
            target_slope,
            tolerance,
            smoke,
        } => {
            let pts = points.resolve(basis)?;
            let target = match (target_slope, process) {
                (Some(t), _) => *t,
                (None, ProcessKind::KlProcess { alpha, .. } | ProcessKind::NonGaussianKl { alpha, .. }) => {
                    kl_rate_exponent(*alpha)
                }
                (None, ProcessKind::GpCholesky { .. }) => -1.0,
            };
            let setup = RateSetup {
                spec: TrueProcessSpec {
                    process: process.clone(),
                    rng_seed: seed,
                },
                points: pts,
                family: basis.clone(),
                ns: ns.clone(),
                sizes: sizes.clone(),
                replications: *replications,
                theta: *theta,
                target_slope: target,
                tolerance: *tolerance,
            };
            let report = rate_check(&setup, exec)?;
            let pass = *smoke || report.pass;
            prepare_output(&out)?;
            write_report(&out, name, seed, report.pass, &report)?;
            let rows: Vec<Vec<f64>> = report
                .points
                .iter()
                .map(|p| vec![p.n_samples as f64, p.mc_risk, p.oracle_risk, p.mc_se])
                .collect();
            write_file(&out.join("plotdata_rate.csv"), &table_csv(&PLOT_HEADER, &rows))?;
            pass
        }
        ExperimentConfig::Concentration {
            phi,
            n_blocks,
            a_tilde,
            noise,
            p,
            replications,
            xs,
        } => {
            let phi = SymMatrix::from_rows(phi)?;
            let setup = ConcentrationSetup {
                a_tilde: a_tilde.build(*n_blocks, phi.dim())?,
                phi,
                n_blocks: *n_blocks,
                noise: *noise,
                p: *p,
                replications: *replications,
                xs: xs.clone(),
                seed,
            };
            let report = concentration_check(&setup, exec)?;
            let pass = report.slope_pass && report.closed_form_pass.unwrap_or(true);
            prepare_output(&out)?;
            write_report(&out, name, seed, pass, &report)?;
            let rows: Vec<Vec<f64>> = report
                .rows
                .iter()
                .map(|r| vec![r.x, r.empirical, r.bound_shape, r.se])
                .collect();
            write_file(&out.join("plotdata_tail.csv"), &table_csv(&PLOT_HEADER, &rows))?;
            pass
        }
    };
    write_file(&out.join("config_echo.json"), &to_json_pretty(&cfg)?)?;
    Ok(if pass { Outcome::Done } else { Outcome::AssertionFailed })
}
