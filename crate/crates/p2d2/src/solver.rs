//! The proximal primal-dual diffusion iteration in its three equivalent
//! forms, the EXTRA special case, a centralized proximal-gradient oracle for
//! ground truth, and the `run` harness that produces iteration traces.
//!
//! All forms share the same trajectory for the same `w_0` when every other
//! state variable starts at zero; the agent form is the decentralized
//! implementation (one broadcast matrix per synchronous round), the stacked
//! form is its matrix transcription, and the reference form tracks the dual
//! iterate `y` explicitly through the consensus square root.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::model::{self, AgentCost, ModelError};
use crate::prox::{self, ProxError, Regularizer};
use crate::topology::{Network, TopologyError};
use crate::trace::{IterationTrace, TraceRecord};

/// Iterate entries beyond this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Default stopping tolerance for the centralized ground-truth oracle.
pub const ORACLE_DEFAULT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("iterate left the finite range at iteration {iter} ({what})")]
    NonFiniteIterate { iter: usize, what: &'static str },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("oracle stalled at residual {residual:.3e} after {iters} iterations (tol {tol:.3e})")]
    NoConvergence { residual: f64, iters: usize, tol: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Which transcription of the recursion to execute. All are trajectory
/// equivalent; `Extra` is the stacked form restricted to a zero regularizer
/// and unit dual step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverForm {
    Agent,
    Stacked,
    Reference,
    Extra,
}

impl fmt::Display for SolverForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SolverForm::Agent => "agent",
            SolverForm::Stacked => "stacked",
            SolverForm::Reference => "reference",
            SolverForm::Extra => "extra",
        };
        f.write_str(name)
    }
}

impl FromStr for SolverForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent" => Ok(SolverForm::Agent),
            "stacked" => Ok(SolverForm::Stacked),
            "reference" => Ok(SolverForm::Reference),
            "extra" => Ok(SolverForm::Extra),
            other => Err(format!("unknown solver form '{other}'")),
        }
    }
}

/// Step sizes and run limits. The step-size bounds of the certificate are
/// advisory here: out-of-range values run anyway (callers may warn), since
/// the bounds are sufficient, not necessary.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Primal step size, > 0.
    pub mu: f64,
    /// Dual step size, in (0, 1].
    pub alpha: f64,
    pub max_iters: usize,
    /// Relative-error stop; 0 disables early stopping.
    pub tol: f64,
    /// Initial `K x M` iterate; zeros when absent.
    pub w0: Option<DMatrix<f64>>,
}

/// Everything a run needs besides step sizes.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub network: &'a Network,
    pub costs: &'a [AgentCost],
    pub regularizer: Regularizer,
}

/// Iterate memory. Rows are agents. `psi` is the per-agent gradient-step
/// memory of the decentralized form, `grad_prev` the gradient memory of the
/// stacked form, and `y` the dual of the reference form; each is present
/// exactly when its form runs.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub w: DMatrix<f64>,
    pub w_prev: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub psi: Option<DMatrix<f64>>,
    pub grad_prev: Option<DMatrix<f64>>,
    pub y: Option<DMatrix<f64>>,
    pub iter: usize,
}

/// One configured run over one problem; owns the state, borrows the rest.
pub struct Solver<'a> {
    problem: Problem<'a>,
    config: SolverConfig,
    form: SolverForm,
    /// Sorted closed neighborhoods (the agent and its neighbors) used by the
    /// decentralized form; ascending order fixes the accumulation order, so
    /// results do not depend on the worker-thread count.
    neighborhoods: Vec<Vec<usize>>,
    state: SolverState,
    num_agents: usize,
    dimension: usize,
}

impl<'a> Solver<'a> {
    pub fn new(
        problem: Problem<'a>,
        config: SolverConfig,
        form: SolverForm,
    ) -> Result<Self, SolverError> {
        let invalid = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(config.mu.is_finite() && config.mu > 0.0) {
            return invalid(format!("mu = {} must be > 0", config.mu));
        }
        if !(config.alpha.is_finite() && config.alpha > 0.0 && config.alpha <= 1.0) {
            return invalid(format!("alpha = {} must be in (0, 1]", config.alpha));
        }
        if !(config.tol.is_finite() && config.tol >= 0.0) {
            return invalid(format!("tol = {} must be >= 0", config.tol));
        }
        problem.regularizer.validate()?;

        let num_agents = problem.network.num_agents();
        if problem.costs.len() != num_agents {
            return invalid(format!("{} costs for {} agents", problem.costs.len(), num_agents));
        }
        let dimension = problem.costs[0].dimension();
        if problem.costs.iter().any(|c| c.dimension() != dimension) {
            return invalid("agent costs disagree on the dimension".into());
        }
        if form == SolverForm::Extra {
            if !problem.regularizer.is_zero() {
                return invalid("the EXTRA form requires a zero regularizer".into());
            }
            if config.alpha != 1.0 {
                return invalid("the EXTRA form requires alpha = 1".into());
            }
        }

        let w0 = match &config.w0 {
            Some(w0) => {
                if w0.nrows() != num_agents || w0.ncols() != dimension {
                    return invalid(format!(
                        "w0 is {}x{}, expected {num_agents}x{dimension}",
                        w0.nrows(),
                        w0.ncols()
                    ));
                }
                w0.clone()
            }
            None => DMatrix::zeros(num_agents, dimension),
        };

        let zeros = DMatrix::zeros(num_agents, dimension);
        let state = SolverState {
            w: w0,
            w_prev: zeros.clone(),
            z: zeros.clone(),
            psi: (form == SolverForm::Agent).then(|| zeros.clone()),
            grad_prev: matches!(form, SolverForm::Stacked | SolverForm::Extra)
                .then(|| zeros.clone()),
            y: (form == SolverForm::Reference).then(|| zeros.clone()),
            iter: 0,
        };

        let mut neighborhoods = problem.network.graph.adjacency();
        for (agent, list) in neighborhoods.iter_mut().enumerate() {
            let pos = list.partition_point(|&s| s < agent);
            list.insert(pos, agent);
        }

        Ok(Self { problem, config, form, neighborhoods, state, num_agents, dimension })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn into_state(self) -> SolverState {
        self.state
    }

    pub fn form(&self) -> SolverForm {
        self.form
    }

    /// Replaces the iterate memory, keeping dimensions and the form's memory
    /// fields intact. Intended for starting at constructed points such as
    /// known fixed points.
    pub fn set_state(&mut self, state: SolverState) -> Result<(), SolverError> {
        let shape_ok =
            |m: &DMatrix<f64>| m.nrows() == self.num_agents && m.ncols() == self.dimension;
        if !(shape_ok(&state.w) && shape_ok(&state.w_prev) && shape_ok(&state.z)) {
            return Err(SolverError::InvalidConfig("state shape mismatch".into()));
        }
        let memory_ok = match self.form {
            SolverForm::Agent => state.psi.as_ref().is_some_and(&shape_ok),
            SolverForm::Stacked | SolverForm::Extra => {
                state.grad_prev.as_ref().is_some_and(&shape_ok)
            }
            SolverForm::Reference => state.y.as_ref().is_some_and(shape_ok),
        };
        if !memory_ok {
            return Err(SolverError::InvalidConfig(
                "state is missing the memory field of this form".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    /// Advances one synchronous round.
    pub fn step(&mut self) -> Result<&SolverState, SolverError> {
        match self.form {
            SolverForm::Agent => self.step_agent()?,
            SolverForm::Stacked | SolverForm::Extra => self.step_stacked()?,
            SolverForm::Reference => self.step_reference()?,
        }
        self.state.iter += 1;
        self.check_finite()?;
        Ok(&self.state)
    }

    /// Decentralized round: every agent broadcasts one vector, then mixes
    /// its closed neighborhood with the consensus weights, takes a local
    /// gradient step, and applies the prox.
    fn step_agent(&mut self) -> Result<(), SolverError> {
        let b = self.problem.network.consensus.matrix();
        let mu = self.config.mu;
        // The single communicated matrix of the round.
        let broadcast = self.config.alpha * &self.state.z + &self.state.w - &self.state.w_prev;

        let state = &self.state;
        let costs = self.problem.costs;
        let neighborhoods = &self.neighborhoods;
        let dimension = self.dimension;
        let rows: Vec<(DVector<f64>, DVector<f64>)> = (0..self.num_agents)
            .into_par_iter()
            .map(|agent| -> Result<(DVector<f64>, DVector<f64>), SolverError> {
                let mut mixed = DVector::zeros(dimension);
                for &s in &neighborhoods[agent] {
                    mixed.axpy(b[(s, agent)], &broadcast.row(s).transpose(), 1.0);
                }
                let w_row = state.w.row(agent).transpose();
                let gradient_step = &w_row - mu * costs[agent].gradient(&w_row)?;
                Ok((mixed, gradient_step))
            })
            .collect::<Result<_, _>>()?;

        let psi_old = self
            .state
            .psi
            .as_ref()
            .ok_or_else(|| SolverError::InvalidConfig("agent form lost its memory".into()))?;
        let mut z_new = self.state.z.clone();
        let mut psi_new = DMatrix::zeros(self.num_agents, self.dimension);
        for agent in 0..self.num_agents {
            let (mixed, gradient_step) = &rows[agent];
            for j in 0..self.dimension {
                z_new[(agent, j)] += gradient_step[j] - psi_old[(agent, j)] - mixed[j];
                psi_new[(agent, j)] = gradient_step[j];
            }
        }
        let w_new = prox::prox_matrix(&self.problem.regularizer, &z_new, mu)?;

        self.state.psi = Some(psi_new);
        self.state.z = z_new;
        self.state.w_prev = std::mem::replace(&mut self.state.w, w_new);
        Ok(())
    }

    /// Matrix transcription of the same round:
    /// `Z <- (I - alpha B) Z + (I - B)(W - W_prev) - mu (grad - grad_prev)`.
    fn step_stacked(&mut self) -> Result<(), SolverError> {
        let b = self.problem.network.consensus.matrix();
        let (mu, alpha) = (self.config.mu, self.config.alpha);
        let grad = model::stacked_gradient(self.problem.costs, &self.state.w)?;
        let grad_prev = self
            .state
            .grad_prev
            .as_ref()
            .ok_or_else(|| SolverError::InvalidConfig("stacked form lost its memory".into()))?;
        let diff = &self.state.w - &self.state.w_prev;
        let z_new = &self.state.z - alpha * (b * &self.state.z) + &diff
            - b * &diff
            - mu * (&grad - grad_prev);
        let w_new = prox::prox_matrix(&self.problem.regularizer, &z_new, mu)?;

        self.state.grad_prev = Some(grad);
        self.state.z = z_new;
        self.state.w_prev = std::mem::replace(&mut self.state.w, w_new);
        Ok(())
    }

    /// Primal-dual reference round with the dual tracked through the
    /// consensus square root:
    /// `z = w - mu grad(w) - B w - B^{1/2} y`, `y <- y + alpha B^{1/2} z`.
    fn step_reference(&mut self) -> Result<(), SolverError> {
        let b = self.problem.network.consensus.matrix();
        let b_sqrt = self.problem.network.consensus.sqrt();
        let (mu, alpha) = (self.config.mu, self.config.alpha);
        let grad = model::stacked_gradient(self.problem.costs, &self.state.w)?;
        let y =
            self.state.y.as_ref().ok_or_else(|| {
                SolverError::InvalidConfig("reference form lost its memory".into())
            })?;
        let z_new = &self.state.w - mu * grad - b * &self.state.w - b_sqrt * y;
        let y_new = y + alpha * (b_sqrt * &z_new);
        let w_new = prox::prox_matrix(&self.problem.regularizer, &z_new, mu)?;

        self.state.y = Some(y_new);
        self.state.z = z_new;
        self.state.w_prev = std::mem::replace(&mut self.state.w, w_new);
        Ok(())
    }

    fn check_finite(&self) -> Result<(), SolverError> {
        let bad = |m: &DMatrix<f64>| m.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT);
        let what = if bad(&self.state.w) {
            Some("primal iterate")
        } else if bad(&self.state.z) {
            Some("pre-prox iterate")
        } else if self.state.y.as_ref().is_some_and(bad) {
            Some("dual iterate")
        } else {
            None
        };
        match what {
            Some(what) => Err(SolverError::NonFiniteIterate { iter: self.state.iter, what }),
            None => Ok(()),
        }
    }
}

/// Minimizer of the average composite objective and the subgradient that
/// certifies it, from [`ista_oracle`].
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub w_star: DVector<f64>,
    pub r_star: DVector<f64>,
}

/// Which contraction quantity `run` should record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovKind {
    /// `||w - W*||^2 + ||y - Y*||^2 / (alpha beta)`, the general-regularizer
    /// quantity with `beta = 1 - alpha sigma_max`.
    Composite,
    /// `||w - W*||^2_Q + ||y - Y*||^2 / alpha` with `Q = I - alpha B`, the
    /// smooth-case (zero-regularizer) quantity.
    Smooth,
}

/// Optional instrumentation for [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Enables the relative-squared-error column and error-based stopping.
    pub ground_truth: Option<GroundTruth>,
    /// Requires the reference form and a ground truth.
    pub lyapunov: Option<LyapunovKind>,
    /// Fills the elapsed-time column (off by default: timing is the one
    /// nondeterministic column, and determinism is the default contract).
    pub record_timing: bool,
}

/// A finished run: the measured trace and the final iterate memory.
#[derive(Debug)]
pub struct RunOutput {
    pub trace: IterationTrace,
    pub state: SolverState,
}

struct Target {
    w_mat: DMatrix<f64>,
    w_norm_sq: f64,
    y_mat: DMatrix<f64>,
}

/// Executes a full run: steps until `tol` or `max_iters`, recording one
/// trace row per iteration plus the initial state. Deterministic for fixed
/// inputs regardless of the worker-thread count.
pub fn run(
    problem: Problem<'_>,
    config: &SolverConfig,
    form: SolverForm,
    options: &RunOptions,
) -> Result<RunOutput, SolverError> {
    let mut solver = Solver::new(problem, config.clone(), form)?;
    let num_agents = problem.network.num_agents();
    let consensus = &problem.network.consensus;

    let target = match &options.ground_truth {
        Some(gt) => {
            // z* = mu r* + w*; the dual fixed point solves
            // B^{1/2} Y = -mu (grad_k(w*) + r*) rowwise, taken minimum-norm.
            let mut rhs = DMatrix::zeros(num_agents, gt.w_star.len());
            for (k, cost) in problem.costs.iter().enumerate() {
                let row = -config.mu * (cost.gradient(&gt.w_star)? + &gt.r_star);
                rhs.row_mut(k).copy_from(&row.transpose());
            }
            Some(Target {
                w_mat: replicate_rows(num_agents, &gt.w_star),
                w_norm_sq: gt.w_star.norm_squared().max(f64::MIN_POSITIVE),
                y_mat: consensus.sqrt_pinv() * rhs,
            })
        }
        None => None,
    };

    let beta = match options.lyapunov {
        Some(kind) => {
            if form != SolverForm::Reference {
                return Err(SolverError::InvalidConfig(
                    "contraction tracking needs the reference form (it reads y)".into(),
                ));
            }
            if target.is_none() {
                return Err(SolverError::InvalidConfig(
                    "contraction tracking needs a ground truth".into(),
                ));
            }
            match kind {
                LyapunovKind::Composite => {
                    let bounds = consensus.spectral_bounds()?;
                    Some(1.0 - config.alpha * bounds.sigma_max)
                }
                LyapunovKind::Smooth => None,
            }
        }
        None => None,
    };

    let start = Instant::now();
    let record = |solver: &Solver<'_>| -> Result<TraceRecord, SolverError> {
        let state = solver.state();
        let rel_sq_error =
            target.as_ref().map(|t| (&state.w - &t.w_mat).norm_squared() / t.w_norm_sq);
        let mean = column_means(&state.w);
        let objective =
            model::average_loss(problem.costs, &mean)? + problem.regularizer.value(&mean);
        let fixed_point_residual = analysis::fixed_point_residual(
            &state.w,
            &state.z,
            state.y.as_ref(),
            problem.costs,
            &problem.regularizer,
            consensus,
            config.mu,
        )?
        .max_residual();
        let lyapunov = options.lyapunov.map(|kind| {
            let t = target.as_ref().expect("validated above");
            let y = state.y.as_ref().expect("validated above");
            let w_err = &state.w - &t.w_mat;
            let y_err = y - &t.y_mat;
            match kind {
                LyapunovKind::Composite => {
                    w_err.norm_squared()
                        + y_err.norm_squared() / (config.alpha * beta.expect("composite sets beta"))
                }
                LyapunovKind::Smooth => {
                    let quad = (consensus.matrix() * &w_err).component_mul(&w_err).sum();
                    w_err.norm_squared() - config.alpha * quad + y_err.norm_squared() / config.alpha
                }
            }
        });
        Ok(TraceRecord {
            iter: state.iter,
            rel_sq_error,
            consensus_residual: (consensus.matrix() * &state.w).norm(),
            objective,
            fixed_point_residual,
            lyapunov,
            elapsed_ms: options.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    };

    let mut trace = IterationTrace::new(form);
    trace.records.push(record(&solver)?);
    let mut prev_w = solver.state().w.clone();
    for _ in 1..=config.max_iters {
        solver.step()?;
        let rec = record(&solver)?;
        let stop = config.tol > 0.0
            && match rec.rel_sq_error {
                Some(err) => err < config.tol,
                None => {
                    let change =
                        (&solver.state().w - &prev_w).norm() / solver.state().w.norm().max(1.0);
                    change < config.tol
                }
            };
        prev_w.copy_from(&solver.state().w);
        trace.records.push(rec);
        if stop {
            break;
        }
    }
    Ok(RunOutput { trace, state: solver.into_state() })
}

/// Centralized proximal gradient descent on the average composite objective.
/// Returns the minimizer along with the subgradient `r* = (z - w)/step`
/// extracted from the final prox step, which satisfies
/// `average_gradient(w*) + r* ≈ 0` at convergence.
pub fn ista_oracle(
    costs: &[AgentCost],
    regularizer: &Regularizer,
    step: Option<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<GroundTruth, SolverError> {
    regularizer.validate()?;
    if !(tol.is_finite() && tol > 0.0) {
        return Err(SolverError::InvalidConfig(format!("oracle tol = {tol} must be > 0")));
    }
    let step = match step {
        Some(s) => s,
        None => {
            let lipschitz = model::average_lipschitz(costs)?;
            if lipschitz <= 0.0 {
                return Err(SolverError::InvalidConfig(
                    "average cost has no curvature bound; give an explicit oracle step".into(),
                ));
            }
            0.99 / lipschitz
        }
    };
    if !(step.is_finite() && step > 0.0) {
        return Err(SolverError::InvalidConfig(format!("oracle step = {step} must be > 0")));
    }

    let dimension = costs.first().ok_or(ModelError::EmptyCosts)?.dimension();
    let mut w = DVector::zeros(dimension);
    let mut r = DVector::zeros(dimension);
    for iters in 1..=max_iters {
        let z = &w - step * model::average_gradient(costs, &w)?;
        let w_next = prox::prox(regularizer, &z, step)?;
        r = (&z - &w_next) / step;
        let residual = (&w_next - &w).norm() / w_next.norm().max(1.0);
        w = w_next;
        if residual < tol {
            return Ok(GroundTruth { w_star: w, r_star: r });
        }
        if iters == max_iters && residual > 10.0 * tol {
            return Err(SolverError::NoConvergence { residual, iters, tol });
        }
    }
    Ok(GroundTruth { w_star: w, r_star: r })
}

fn replicate_rows(count: usize, v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(count, v.len(), |_, j| v[j])
}

/// Mean over agents (rows) of each coordinate.
fn column_means(w: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(w.ncols(), |j, _| w.column(j).mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Graph;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn single_agent_network() -> Network {
        Network::single_agent().unwrap()
    }

    fn random_logistic_costs(
        num_agents: usize,
        dim: usize,
        lambda: f64,
        seed_value: u64,
    ) -> Vec<AgentCost> {
        let (costs, _) =
            model::synthesize_logistic(num_agents, 12, dim, dim.min(3), 0.1, lambda, seed_value)
                .unwrap();
        costs
    }

    fn identity_quadratic(dim: usize) -> AgentCost {
        AgentCost::quadratic(DMatrix::identity(dim, dim), DVector::zeros(dim), 0.0).unwrap()
    }

    #[test]
    fn single_agent_iterates_halve() {
        let network = single_agent_network();
        let costs = vec![identity_quadratic(1)];
        let problem = Problem { network: &network, costs: &costs, regularizer: Regularizer::Zero };
        let config = SolverConfig {
            mu: 0.5,
            alpha: 1.0,
            max_iters: 2,
            tol: 0.0,
            w0: Some(DMatrix::from_element(1, 1, 1.0)),
        };
        for form in [SolverForm::Agent, SolverForm::Stacked, SolverForm::Reference] {
            let mut solver = Solver::new(problem, config.clone(), form).unwrap();
            solver.step().unwrap();
            assert_abs_diff_eq!(solver.state().w[(0, 0)], 0.5, epsilon = 1e-15);
            solver.step().unwrap();
            assert_abs_diff_eq!(solver.state().w[(0, 0)], 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_agent_equals_proximal_gradient() {
        let network = single_agent_network();
        let costs = random_logistic_costs(1, 4, 0.2, 11);
        let regularizer = Regularizer::L1 { rho: 0.05 };
        let problem = Problem { network: &network, costs: &costs, regularizer };
        let mu = 0.4;
        let config = SolverConfig { mu, alpha: 0.7, max_iters: 0, tol: 0.0, w0: None };
        let mut solver = Solver::new(problem, config, SolverForm::Stacked).unwrap();

        let mut w = DVector::zeros(4);
        for _ in 0..50 {
            solver.step().unwrap();
            let z = &w - mu * costs[0].gradient(&w).unwrap();
            w = prox::prox(&regularizer, &z, mu).unwrap();
            let row = solver.state().w.row(0).transpose();
            assert!((row - &w).norm() < 1e-10);
        }
    }

    #[test]
    fn identical_agents_stay_identical() {
        let network = Network::metropolis(Graph::ring(4).unwrap()).unwrap();
        let cost = identity_quadratic(3);
        let costs = vec![cost.clone(), cost.clone(), cost.clone(), cost];
        let problem = Problem {
            network: &network,
            costs: &costs,
            regularizer: Regularizer::L1 { rho: 0.01 },
        };
        let w0 = DMatrix::from_fn(4, 3, |_, j| 1.0 + j as f64);
        let config = SolverConfig { mu: 0.3, alpha: 1.0, max_iters: 0, tol: 0.0, w0: Some(w0) };
        let mut solver = Solver::new(problem, config, SolverForm::Agent).unwrap();
        for _ in 0..20 {
            solver.step().unwrap();
            let w = &solver.state().w;
            for agent in 1..4 {
                assert!((w.row(agent) - w.row(0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn three_forms_share_one_trajectory() {
        let network = Network::metropolis(Graph::random_connected(5, 0.5, 3).unwrap()).unwrap();
        let costs = random_logistic_costs(5, 6, 0.1, 17);
        let problem = Problem {
            network: &network,
            costs: &costs,
            regularizer: Regularizer::L1 { rho: 0.02 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w0 = DMatrix::from_fn(5, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let config = SolverConfig { mu: 0.2, alpha: 0.8, max_iters: 0, tol: 0.0, w0: Some(w0) };
        let mut agent = Solver::new(problem, config.clone(), SolverForm::Agent).unwrap();
        let mut stacked = Solver::new(problem, config.clone(), SolverForm::Stacked).unwrap();
        let mut reference = Solver::new(problem, config, SolverForm::Reference).unwrap();
        for _ in 0..100 {
            agent.step().unwrap();
            stacked.step().unwrap();
            reference.step().unwrap();
            let w = &agent.state().w;
            assert!((w - &stacked.state().w).abs().max() < 1e-11);
            assert!((w - &reference.state().w).abs().max() < 1e-10);
        }
    }

    #[test]
    fn reference_dual_stays_in_range_space() {
        let network = Network::metropolis(Graph::random_connected(6, 0.5, 9).unwrap()).unwrap();
        let costs = random_logistic_costs(6, 4, 0.1, 5);
        let problem = Problem {
            network: &network,
            costs: &costs,
            regularizer: Regularizer::ElasticNet { rho1: 0.01, rho2: 0.05 },
        };
        let config = SolverConfig { mu: 0.3, alpha: 0.9, max_iters: 0, tol: 0.0, w0: None };
        let mut solver = Solver::new(problem, config, SolverForm::Reference).unwrap();
        for _ in 0..60 {
            solver.step().unwrap();
            let y = solver.state().y.as_ref().unwrap();
            // Null space of B^{1/2} is the all-ones direction: column sums
            // of y measure the out-of-range component.
            let mut null_norm_sq = 0.0;
            for j in 0..y.ncols() {
                let s: f64 = y.column(j).sum();
                null_norm_sq += s * s / y.nrows() as f64;
            }
            assert!(null_norm_sq.sqrt() < 1e-8);
        }
    }

    #[test]
    fn reference_form_fixes_its_fixed_point() {
        let network = Network::metropolis(Graph::random_connected(5, 0.6, 31).unwrap()).unwrap();
        let costs = random_logistic_costs(5, 4, 0.3, 41);
        let regularizer = Regularizer::L1 { rho: 0.01 };
        let gt = ista_oracle(&costs, &regularizer, None, 1e-14, 500_000).unwrap();
        let mu = 0.2;

        let z_star = &gt.w_star + mu * &gt.r_star;
        let mut rhs = DMatrix::zeros(5, 4);
        for (k, cost) in costs.iter().enumerate() {
            let row = -mu * (cost.gradient(&gt.w_star).unwrap() + &gt.r_star);
            rhs.row_mut(k).copy_from(&row.transpose());
        }
        let y_star = network.consensus.sqrt_pinv() * rhs;

        let problem = Problem { network: &network, costs: &costs, regularizer };
        let config = SolverConfig { mu, alpha: 0.8, max_iters: 0, tol: 0.0, w0: None };
        let mut solver = Solver::new(problem, config, SolverForm::Reference).unwrap();
        solver
            .set_state(SolverState {
                w: replicate_rows(5, &gt.w_star),
                w_prev: replicate_rows(5, &gt.w_star),
                z: replicate_rows(5, &z_star),
                psi: None,
                grad_prev: None,
                y: Some(y_star.clone()),
                iter: 0,
            })
            .unwrap();
        solver.step().unwrap();
        let state = solver.state();
        assert!((&state.w - replicate_rows(5, &gt.w_star)).abs().max() < 1e-8);
        assert!((&state.z - replicate_rows(5, &z_star)).abs().max() < 1e-8);
        assert!((state.y.as_ref().unwrap() - &y_star).abs().max() < 1e-8);
    }

    #[test]
    fn extra_requires_zero_regularizer_and_unit_alpha() {
        let network = Network::metropolis(Graph::complete(3).unwrap()).unwrap();
        let costs = vec![identity_quadratic(2), identity_quadratic(2), identity_quadratic(2)];
        let bad_reg =
            Problem { network: &network, costs: &costs, regularizer: Regularizer::L1 { rho: 0.1 } };
        let config = SolverConfig { mu: 0.3, alpha: 1.0, max_iters: 5, tol: 0.0, w0: None };
        assert!(matches!(
            Solver::new(bad_reg, config.clone(), SolverForm::Extra),
            Err(SolverError::InvalidConfig(_))
        ));

        let good = Problem { network: &network, costs: &costs, regularizer: Regularizer::Zero };
        let bad_alpha = SolverConfig { alpha: 0.5, ..config.clone() };
        assert!(matches!(
            Solver::new(good, bad_alpha, SolverForm::Extra),
            Err(SolverError::InvalidConfig(_))
        ));
        assert!(Solver::new(good, config, SolverForm::Extra).is_ok());
    }

    #[test]
    fn extra_matches_stacked_and_solves_quadratics() {
        let network = Network::metropolis(Graph::random_connected(4, 0.7, 13).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let costs: Vec<AgentCost> = (0..4)
            .map(|_| {
                let g = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let q = &g * g.transpose() / 3.0 + DMatrix::identity(3, 3) * 0.5;
                let b = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                AgentCost::quadratic(q, b, 0.0).unwrap()
            })
            .collect();
        let problem = Problem { network: &network, costs: &costs, regularizer: Regularizer::Zero };
        let config = SolverConfig { mu: 0.2, alpha: 1.0, max_iters: 400, tol: 0.0, w0: None };

        let extra = run(problem, &config, SolverForm::Extra, &RunOptions::default()).unwrap();
        let stacked = run(problem, &config, SolverForm::Stacked, &RunOptions::default()).unwrap();
        assert_eq!(extra.state.w, stacked.state.w);

        // Closed-form consensus minimizer of the average quadratic.
        let mut q_avg = DMatrix::zeros(3, 3);
        let mut b_avg = DVector::zeros(3);
        for cost in &costs {
            let AgentCost::Quadratic { q, b, .. } = cost else { unreachable!() };
            q_avg += q;
            b_avg += b;
        }
        let w_star = (q_avg / 4.0).lu().solve(&(b_avg / 4.0)).unwrap();
        for agent in 0..4 {
            assert!((extra.state.w.row(agent).transpose() - &w_star).norm() < 1e-8);
        }
        let w_norm = extra.state.w.norm();
        assert!((network.consensus.matrix() * &extra.state.w).norm() / w_norm < 1e-6);
    }

    #[test]
    fn oracle_matches_linear_solve_and_certifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let costs: Vec<AgentCost> = (0..3)
            .map(|_| {
                let g = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
                let q = &g * g.transpose() / 4.0 + DMatrix::identity(4, 4) * 0.3;
                let b = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                AgentCost::quadratic(q, b, 0.0).unwrap()
            })
            .collect();
        let gt = ista_oracle(&costs, &Regularizer::Zero, None, 1e-12, 200_000).unwrap();

        let mut q_avg = DMatrix::zeros(4, 4);
        let mut b_avg = DVector::zeros(4);
        for cost in &costs {
            let AgentCost::Quadratic { q, b, .. } = cost else { unreachable!() };
            q_avg += q;
            b_avg += b;
        }
        let direct = (q_avg / 3.0).lu().solve(&(b_avg / 3.0)).unwrap();
        assert!((&gt.w_star - direct).norm() < 1e-10);

        let grad = model::average_gradient(&costs, &gt.w_star).unwrap();
        assert!((grad + &gt.r_star).norm() < 1e-8);
    }

    #[test]
    fn oracle_soft_threshold_kills_small_gradients() {
        // Average cost ||w||^2/2 has gradient scale below the l1 weight, so
        // the minimizer is the origin.
        let costs = vec![identity_quadratic(3)];
        let gt = ista_oracle(&costs, &Regularizer::L1 { rho: 2.0 }, None, 1e-12, 10_000).unwrap();
        assert_eq!(gt.w_star, DVector::zeros(3));
        let grad = model::average_gradient(&costs, &gt.w_star).unwrap();
        assert!((grad + &gt.r_star).norm() < 1e-8);
    }

    #[test]
    fn run_honors_record_count_and_determinism() {
        let network = Network::metropolis(Graph::path(3).unwrap()).unwrap();
        let costs = random_logistic_costs(3, 4, 0.2, 71);
        let problem = Problem {
            network: &network,
            costs: &costs,
            regularizer: Regularizer::L1 { rho: 0.01 },
        };
        let config = SolverConfig { mu: 0.3, alpha: 0.9, max_iters: 50, tol: 0.0, w0: None };
        let out = run(problem, &config, SolverForm::Agent, &RunOptions::default()).unwrap();
        assert_eq!(out.trace.records.len(), 51);
        let again = run(problem, &config, SolverForm::Agent, &RunOptions::default()).unwrap();
        assert_eq!(out.trace.to_csv_string(), again.trace.to_csv_string());
    }

    #[test]
    fn run_stops_at_tolerance() {
        let network = Network::metropolis(Graph::complete(3).unwrap()).unwrap();
        let costs = random_logistic_costs(3, 4, 0.5, 83);
        let regularizer = Regularizer::L1 { rho: 0.01 };
        let gt = ista_oracle(&costs, &regularizer, None, 1e-13, 500_000).unwrap();
        let problem = Problem { network: &network, costs: &costs, regularizer };
        let config = SolverConfig { mu: 0.3, alpha: 1.0, max_iters: 20_000, tol: 1e-6, w0: None };
        let options = RunOptions { ground_truth: Some(gt), ..Default::default() };
        let out = run(problem, &config, SolverForm::Stacked, &options).unwrap();
        assert!(out.trace.records.len() < 20_001);
        assert!(out.trace.final_rel_sq_error().unwrap() < 1e-6);
    }

    #[test]
    fn divergence_is_detected() {
        let network = single_agent_network();
        let costs = vec![identity_quadratic(2)];
        let problem = Problem { network: &network, costs: &costs, regularizer: Regularizer::Zero };
        let config = SolverConfig {
            mu: 1e6,
            alpha: 1.0,
            max_iters: 100,
            tol: 0.0,
            w0: Some(DMatrix::from_element(1, 2, 1.0)),
        };
        assert!(matches!(
            run(problem, &config, SolverForm::Stacked, &RunOptions::default()),
            Err(SolverError::NonFiniteIterate { .. })
        ));
    }

    #[test]
    fn timing_column_is_opt_in() {
        let network = Network::metropolis(Graph::path(3).unwrap()).unwrap();
        let costs = random_logistic_costs(3, 3, 0.2, 91);
        let problem = Problem { network: &network, costs: &costs, regularizer: Regularizer::Zero };
        let config = SolverConfig { mu: 0.2, alpha: 1.0, max_iters: 3, tol: 0.0, w0: None };
        let silent = run(problem, &config, SolverForm::Stacked, &RunOptions::default()).unwrap();
        assert!(silent.trace.records.iter().all(|r| r.elapsed_ms.is_none()));
        let timed = RunOptions { record_timing: true, ..Default::default() };
        let timed = run(problem, &config, SolverForm::Stacked, &timed).unwrap();
        assert!(timed.trace.records.iter().all(|r| r.elapsed_ms.is_some()));
    }
}
