//! The `p2d2` binary: one JSON config in, one experiment out.
//!
//! Three subcommands share the config schema. `run` executes a solver and
//! writes a CSV trace, `certify` prints the contraction certificate without
//! running anything, and `compare` runs several algorithm forms in lockstep
//! and measures how far their trajectories drift apart.
//!
//! Exit codes: 0 success, 2 config error (the message names the offending
//! field), 3 numerical failure, 4 trajectories diverged in `compare`.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use p2d2::analysis::{self, RateCertificate};
use p2d2::model::{self, AgentCost, CostConstants, ModelError};
use p2d2::prox::Regularizer;
use p2d2::solver::{self, Problem, RunOptions, Solver, SolverConfig, SolverForm};
use p2d2::topology::{Network, SpectralBounds};
use p2d2::trace;

use config::{CostKind, DataSpec, RunConfig, StepsSpec};

/// Accuracy demanded of the centralized oracle that defines the error
/// column; well below anything a run is asked to reach.
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_MAX_ITERS: usize = 2_000_000;

/// Agreement threshold for `compare`, matching the documented contract.
const COMPARE_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "p2d2", version, about = "Decentralized composite optimization harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV trace.
    Run { config: PathBuf },
    /// Print the contraction certificate without running a solver.
    Certify { config: PathBuf },
    /// Run several forms on identical inputs and measure their divergence.
    Compare {
        config: PathBuf,
        /// Comma-separated algorithm forms (agent, stacked, reference,
        /// extra); at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        forms: Vec<String>,
    },
}

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Divergence(msg) => write!(f, "{msg}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Certify { config } => cmd_certify(&config),
        Command::Compare { config, forms } => cmd_compare(&config, &forms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

/// Bad input data (parse errors, too few samples for the agent count) is a
/// config problem; everything else from the model layer is numerical.
fn model_err(err: ModelError) -> CliError {
    match err {
        ModelError::Parse { .. } | ModelError::TooFewSamples(..) => {
            CliError::Config(err.to_string())
        }
        other => CliError::Numerical(other.to_string()),
    }
}

/// Step sizes actually used by a run, plus the certificate when one was
/// derived (certified mode).
struct ResolvedSteps {
    mu: f64,
    alpha: f64,
    certificate: Option<RateCertificate>,
    /// Human-readable line for the trace header, for example
    /// `mu: 0.042 alpha: 0.0011 (certified, safety 0.5)`.
    description: String,
}

/// A config assembled into library objects, ready to run.
struct Experiment {
    network: Network,
    costs: Vec<AgentCost>,
    regularizer: Regularizer,
    constants: CostConstants,
    spectrum: SpectralBounds,
    steps: ResolvedSteps,
}

/// Tries to certify manual step sizes at the admissible maximum of `rho`
/// with the penalty split optimized, the same choices certified mode makes.
fn manual_certificate(
    mu: f64,
    alpha: f64,
    constants: CostConstants,
    spectrum: SpectralBounds,
    smooth_only: bool,
) -> Result<RateCertificate, analysis::AnalysisError> {
    let rho = analysis::max_rho(mu, constants.delta, spectrum.sigma_max)?;
    let (c, _) =
        analysis::optimize_nu_rho(constants.nu, constants.delta, spectrum.sigma_under, rho)?;
    analysis::rate_certificate(mu, alpha, rho, c, constants, spectrum, smooth_only)
}

/// Builds network, costs, constants, and step sizes from a config.
/// `force_unit_alpha` is set when the run uses the consensus-correction
/// special form, which is only defined at `alpha = 1`.
fn build_experiment(cfg: &RunConfig, force_unit_alpha: bool) -> Result<Experiment, CliError> {
    let graph = cfg
        .graph
        .build(cfg.substream("graph"))
        .map_err(|e| CliError::Config(format!("graph: {e}")))?;
    let network = Network::metropolis(graph).map_err(|e| CliError::Numerical(e.to_string()))?;

    let k = network.num_agents();
    let data_seed = cfg.substream("data");
    let costs = match (&cfg.data, cfg.cost.kind) {
        (
            DataSpec::Synthetic { samples_per_agent, dimension, num_nonzero, noise_level },
            CostKind::Logistic,
        ) => {
            model::synthesize_logistic(
                k,
                *samples_per_agent,
                *dimension,
                *num_nonzero,
                *noise_level,
                cfg.cost.lambda,
                data_seed,
            )
            .map_err(model_err)?
            .0
        }
        (
            DataSpec::Synthetic { samples_per_agent, dimension, num_nonzero, noise_level },
            CostKind::Quadratic,
        ) => {
            model::synthesize_quadratic(
                k,
                *samples_per_agent,
                *dimension,
                *num_nonzero,
                *noise_level,
                cfg.cost.lambda,
                data_seed,
            )
            .map_err(model_err)?
            .0
        }
        (DataSpec::Libsvm { path, negative_labels, normalize }, CostKind::Logistic) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("data.path: cannot read {}: {e}", path.display()))
            })?;
            let dataset = model::read_libsvm(&text, negative_labels, *normalize)
                .map_err(|e| CliError::Config(format!("data.path: {}: {e}", path.display())))?;
            model::partition(&dataset, k, cfg.cost.lambda, data_seed).map_err(model_err)?
        }
        (DataSpec::Libsvm { .. }, CostKind::Quadratic) => {
            // validate() already rejects this pairing.
            return Err(CliError::Config("cost.kind = quadratic requires synthetic data".into()));
        }
    };

    let constants = model::estimate_constants(&costs).map_err(model_err)?;
    let spectrum =
        network.consensus.spectral_bounds().map_err(|e| CliError::Numerical(e.to_string()))?;
    let smooth_only = cfg.regularizer.to_regularizer().is_zero();

    let steps = match cfg.steps {
        StepsSpec::Certified { safety } => {
            let defaults = analysis::step_size_defaults(constants, spectrum, safety)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            let alpha = if force_unit_alpha { 1.0 } else { defaults.alpha };
            let certificate = analysis::rate_certificate(
                defaults.mu,
                alpha,
                defaults.rho,
                defaults.c,
                constants,
                spectrum,
                smooth_only,
            )
            .map_err(|e| CliError::Numerical(e.to_string()))?;
            ResolvedSteps {
                mu: defaults.mu,
                alpha,
                certificate: Some(certificate),
                description: format!(
                    "mu: {} alpha: {alpha} (certified, safety {safety})",
                    defaults.mu
                ),
            }
        }
        StepsSpec::Manual { mu, alpha } => {
            match manual_certificate(mu, alpha, constants, spectrum, smooth_only) {
                Ok(_) => {}
                Err(err) => log::warn!(
                    "manual steps are outside the certified region ({err}); running anyway \
                     since the bounds are sufficient, not necessary"
                ),
            }
            ResolvedSteps {
                mu,
                alpha,
                certificate: None,
                description: format!("mu: {mu} alpha: {alpha} (manual)"),
            }
        }
    };

    Ok(Experiment {
        network,
        costs,
        regularizer: cfg.regularizer.to_regularizer(),
        constants,
        spectrum,
        steps,
    })
}

fn cmd_run(path: &Path) -> Result<(), CliError> {
    let cfg = load_config(path)?;
    let output =
        cfg.output.clone().ok_or_else(|| CliError::Config("output is required for run".into()))?;
    let form = cfg.form.to_solver_form();
    let exp = build_experiment(&cfg, form == SolverForm::Extra)?;

    log::info!(
        "K={} M={} delta={} nu={} sigma_max={}",
        exp.network.num_agents(),
        exp.costs[0].dimension(),
        exp.constants.delta,
        exp.constants.nu,
        exp.spectrum.sigma_max
    );

    let ground_truth =
        solver::ista_oracle(&exp.costs, &exp.regularizer, None, ORACLE_TOL, ORACLE_MAX_ITERS)
            .map_err(|e| CliError::Numerical(format!("oracle: {e}")))?;

    let solver_config = SolverConfig {
        mu: exp.steps.mu,
        alpha: exp.steps.alpha,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        w0: None,
    };
    let problem =
        Problem { network: &exp.network, costs: &exp.costs, regularizer: exp.regularizer };
    let options =
        RunOptions { ground_truth: Some(ground_truth), lyapunov: None, record_timing: false };
    let mut out = solver::run(problem, &solver_config, form, &options)
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    out.trace.comments = vec![
        format!("seed: {}", cfg.seed),
        format!("graph: {}", cfg.graph.describe()),
        format!("data: {}", cfg.data.describe()),
        format!("cost: {}", cfg.cost.describe()),
        format!("regularizer: {}", cfg.regularizer.describe()),
        exp.steps.description.clone(),
    ];
    if let Some(cert) = &exp.steps.certificate {
        let fields: Vec<String> =
            cert.entries().iter().map(|(name, value)| format!("{name}={value}")).collect();
        out.trace.comments.push(format!("certificate: {}", fields.join(" ")));
    }

    std::fs::write(&output, out.trace.to_csv_string())
        .map_err(|e| CliError::Numerical(format!("cannot write {}: {e}", output.display())))?;
    if let Some(final_w) = &cfg.final_w {
        std::fs::write(final_w, trace::matrix_to_csv(&out.state.w))
            .map_err(|e| CliError::Numerical(format!("cannot write {}: {e}", final_w.display())))?;
    }

    let iterations = out.trace.records.last().map_or(0, |r| r.iter);
    println!("form = {form}");
    println!("iterations = {iterations}");
    match out.trace.final_rel_sq_error() {
        Some(err) => println!("final_rel_sq_error = {err}"),
        None => println!("final_rel_sq_error = n/a"),
    }
    match analysis::fit_linear_rate(&out.trace, analysis::DEFAULT_RATE_WINDOW) {
        Ok((rate, r_squared)) => {
            println!("fitted_gamma = {rate}");
            println!("fit_r_squared = {r_squared}");
        }
        Err(err) => println!("fitted_gamma = n/a ({err})"),
    }
    if let Some(cert) = &exp.steps.certificate {
        println!("certified_gamma = {}", cert.gamma);
    }
    println!("trace = {}", output.display());
    Ok(())
}

fn cmd_certify(path: &Path) -> Result<(), CliError> {
    let cfg = load_config(path)?;
    let force_unit_alpha = cfg.form.to_solver_form() == SolverForm::Extra;
    let exp = build_experiment(&cfg, force_unit_alpha)?;

    let certificate = match &exp.steps.certificate {
        Some(cert) => *cert,
        None => manual_certificate(
            exp.steps.mu,
            exp.steps.alpha,
            exp.constants,
            exp.spectrum,
            exp.regularizer.is_zero(),
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?,
    };

    println!("sigma_max = {}", exp.spectrum.sigma_max);
    println!("sigma_under = {}", exp.spectrum.sigma_under);
    println!("delta = {}", exp.constants.delta);
    println!("nu = {}", exp.constants.nu);
    for (name, value) in certificate.entries() {
        println!("{name} = {value}");
    }
    Ok(())
}

fn cmd_compare(path: &Path, forms: &[String]) -> Result<(), CliError> {
    let cfg = load_config(path)?;

    let mut parsed: Vec<SolverForm> = Vec::new();
    for name in forms {
        let form: SolverForm = name
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("forms: unknown form '{name}'")))?;
        if !parsed.contains(&form) {
            parsed.push(form);
        }
    }
    if parsed.len() < 2 {
        return Err(CliError::Config("forms: need at least two distinct forms".into()));
    }
    let has_extra = parsed.contains(&SolverForm::Extra);
    if has_extra && !cfg.regularizer.to_regularizer().is_zero() {
        return Err(CliError::Config("forms: extra requires regularizer.type = zero".into()));
    }

    let exp = build_experiment(&cfg, has_extra)?;
    if has_extra && exp.steps.alpha != 1.0 {
        return Err(CliError::Config(format!(
            "forms: extra requires steps.alpha = 1, resolved alpha = {}",
            exp.steps.alpha
        )));
    }

    let problem =
        Problem { network: &exp.network, costs: &exp.costs, regularizer: exp.regularizer };
    let solver_config = SolverConfig {
        mu: exp.steps.mu,
        alpha: exp.steps.alpha,
        max_iters: cfg.max_iters,
        tol: 0.0,
        w0: None,
    };
    let mut solvers: Vec<Solver> = parsed
        .iter()
        .map(|&form| Solver::new(problem, solver_config.clone(), form))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut max_divergence: f64 = 0.0;
    for _ in 0..cfg.max_iters {
        for solver in &mut solvers {
            let form = solver.form();
            solver.step().map_err(|e| CliError::Numerical(format!("{form}: {e}")))?;
        }
        for i in 0..solvers.len() {
            for j in (i + 1)..solvers.len() {
                let diff = (&solvers[i].state().w - &solvers[j].state().w).amax();
                max_divergence = max_divergence.max(diff);
            }
        }
    }

    let names: Vec<String> = parsed.iter().map(|f| f.to_string()).collect();
    println!("forms = {}", names.join(","));
    println!("iterations = {}", cfg.max_iters);
    println!("max_divergence = {max_divergence}");
    if max_divergence < COMPARE_TOL {
        Ok(())
    } else {
        Err(CliError::Divergence(format!(
            "trajectories diverge: max componentwise difference {max_divergence} >= {COMPARE_TOL}"
        )))
    }
}
