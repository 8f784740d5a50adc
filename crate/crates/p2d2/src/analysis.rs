//! Linear-convergence certificates and diagnostics: the restricted
//! strong-convexity constant `nu_rho`, the admissible penalization range,
//! step-size defaults, the contraction factor `gamma`, fixed-point
//! residuals, and empirical rate fitting from traces.
//!
//! All certificate formulas are closed-form scalar evaluations:
//!
//! * `nu_rho = min{nu - 2 delta c, rho sigma_under c^2 / (4(c^2 + 1))}`
//!   for `c` in `(0, nu/(2 delta))`,
//! * `rho <= (1 - sigma_max - mu delta) / (mu (2 - sigma_max - mu delta))`,
//! * `gamma1 = 1 - mu nu_rho (2 - sigma_max - mu delta)`,
//!   `gamma2 = 1 - alpha sigma_under`, `beta = 1 - alpha sigma_max`,
//! * composite case: `alpha <= min{1, mu nu_rho (2 - sigma_max - mu delta)}`
//!   and `gamma = max{gamma1/beta, gamma2}`; smooth case (zero regularizer):
//!   `alpha <= 1` suffices and `gamma = max{gamma1, gamma2}`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{self, AgentCost, CostConstants, ModelError};
use crate::prox::{self, ProxError, Regularizer};
use crate::topology::{ConsensusMatrix, SpectralBounds};
use crate::trace::IterationTrace;

/// Default safety factor for the primal step size.
pub const DEFAULT_SAFETY: f64 = 0.5;
/// Default tail fraction used by the empirical rate fit.
pub const DEFAULT_RATE_WINDOW: f64 = 0.5;
/// Errors below this floor are numerical noise and excluded from rate fits.
pub const RATE_FIT_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("c = {c} outside (0, {max})")]
    InvalidC { c: f64, max: f64 },
    #[error("rho = {0} must be > 0")]
    InvalidRho(f64),
    #[error("mu = {mu} at or above the bound (1 - sigma_max)/delta = {bound}")]
    StepTooLarge { mu: f64, bound: f64 },
    #[error("certificate unavailable: {0}")]
    CertificateUnavailable(String),
    #[error("rate fit needs at least 10 usable error records, found {0}")]
    InsufficientData(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prox(#[from] ProxError),
}

/// Restricted strong-convexity constant:
/// `min{nu - 2 delta c, rho sigma_under c^2 / (4 (c^2 + 1))}`.
pub fn nu_rho(
    nu: f64,
    delta: f64,
    sigma_under: f64,
    rho: f64,
    c: f64,
) -> Result<f64, AnalysisError> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(AnalysisError::InvalidRho(rho));
    }
    let c_max = nu / (2.0 * delta);
    if !(c.is_finite() && c > 0.0 && c < c_max) {
        return Err(AnalysisError::InvalidC { c, max: c_max });
    }
    let cost_term = nu - 2.0 * delta * c;
    let network_term = rho * sigma_under * c * c / (4.0 * (c * c + 1.0));
    Ok(cost_term.min(network_term))
}

/// Maximizes [`nu_rho`] over `c` by golden-section search on
/// `(0, nu/(2 delta))`; the objective is the minimum of a decreasing and an
/// increasing branch, hence unimodal. Returns `(c_star, nu_rho_star)`.
pub fn optimize_nu_rho(
    nu: f64,
    delta: f64,
    sigma_under: f64,
    rho: f64,
) -> Result<(f64, f64), AnalysisError> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(AnalysisError::InvalidRho(rho));
    }
    let c_max = nu / (2.0 * delta);
    if !(c_max.is_finite() && c_max > 0.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "nu/(2 delta) = {c_max} leaves no room for c"
        )));
    }
    let objective = |c: f64| {
        let cost_term = nu - 2.0 * delta * c;
        let network_term = rho * sigma_under * c * c / (4.0 * (c * c + 1.0));
        cost_term.min(network_term)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, c_max);
    let mut c1 = hi - inv_phi * (hi - lo);
    let mut c2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (objective(c1), objective(c2));
    while hi - lo > 1e-10 {
        if f1 >= f2 {
            hi = c2;
            c2 = c1;
            f2 = f1;
            c1 = hi - inv_phi * (hi - lo);
            f1 = objective(c1);
        } else {
            lo = c1;
            c1 = c2;
            f1 = f2;
            c2 = lo + inv_phi * (hi - lo);
            f2 = objective(c2);
        }
    }
    let c_star = 0.5 * (lo + hi);
    Ok((c_star, objective(c_star)))
}

/// Largest admissible penalization coefficient,
/// `(1 - sigma_max - mu delta) / (mu (2 - sigma_max - mu delta))`.
pub fn max_rho(mu: f64, delta: f64, sigma_max: f64) -> Result<f64, AnalysisError> {
    let bound = (1.0 - sigma_max) / delta;
    if !(mu.is_finite() && mu > 0.0 && mu < bound) {
        return Err(AnalysisError::StepTooLarge { mu, bound });
    }
    Ok((1.0 - sigma_max - mu * delta) / (mu * (2.0 - sigma_max - mu * delta)))
}

/// Certified step sizes and the auxiliary constants behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub mu: f64,
    pub alpha: f64,
    pub rho: f64,
    pub c: f64,
    pub nu_rho: f64,
}

/// Builds step sizes satisfying both certificate clauses by construction:
/// `mu = safety (1 - sigma_max)/delta`, `rho` at its admissible maximum,
/// `c` optimized, and `alpha = min{1, mu nu_rho (2 - sigma_max - mu delta)}`.
pub fn step_size_defaults(
    constants: CostConstants,
    spectrum: SpectralBounds,
    safety: f64,
) -> Result<StepSizes, AnalysisError> {
    if !(safety.is_finite() && safety > 0.0 && safety < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "safety = {safety} must be in (0, 1)"
        )));
    }
    let mu = safety * (1.0 - spectrum.sigma_max) / constants.delta;
    let rho = max_rho(mu, constants.delta, spectrum.sigma_max)?;
    let (c, nu_rho_star) =
        optimize_nu_rho(constants.nu, constants.delta, spectrum.sigma_under, rho)?;
    let alpha = (mu * nu_rho_star * (2.0 - spectrum.sigma_max - mu * constants.delta)).min(1.0);
    Ok(StepSizes { mu, alpha, rho, c, nu_rho: nu_rho_star })
}

/// A verified contraction certificate. `smooth_only` marks the
/// zero-regularizer variant, whose `gamma` combines the branches without the
/// `beta` division and whose weighted norm uses `Q = I - alpha B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCertificate {
    pub mu: f64,
    pub alpha: f64,
    pub rho: f64,
    pub c: f64,
    pub nu_rho: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub smooth_only: bool,
}

impl RateCertificate {
    /// The matrix `Q = I - alpha B` of the smooth-case weighted norm.
    pub fn weighted_q(&self, consensus: &ConsensusMatrix) -> DMatrix<f64> {
        let k = consensus.num_agents();
        DMatrix::identity(k, k) - self.alpha * consensus.matrix()
    }

    /// Name-value pairs in a stable order, for reports.
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("rho", self.rho),
            ("c", self.c),
            ("nu_rho", self.nu_rho),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ]
    }
}

/// Evaluates the contraction certificate for given step sizes, verifying
/// every clause it depends on; the error names the violated clause.
pub fn rate_certificate(
    mu: f64,
    alpha: f64,
    rho: f64,
    c: f64,
    constants: CostConstants,
    spectrum: SpectralBounds,
    smooth_only: bool,
) -> Result<RateCertificate, AnalysisError> {
    let unavailable = |clause: String| Err(AnalysisError::CertificateUnavailable(clause));
    let mu_bound = (1.0 - spectrum.sigma_max) / constants.delta;
    if !(mu.is_finite() && mu > 0.0 && mu < mu_bound) {
        return unavailable(format!(
            "mu = {mu} not in (0, {mu_bound}) = (0, (1 - sigma_max)/delta)"
        ));
    }
    let rho_bound = max_rho(mu, constants.delta, spectrum.sigma_max)?;
    if !(rho.is_finite() && rho > 0.0 && rho <= rho_bound) {
        return unavailable(format!(
            "rho = {rho} not in (0, {rho_bound}] from the penalization bound"
        ));
    }
    let nu_rho_value = nu_rho(constants.nu, constants.delta, spectrum.sigma_under, rho, c)
        .map_err(|e| AnalysisError::CertificateUnavailable(e.to_string()))?;
    if nu_rho_value <= 0.0 {
        return unavailable(format!("nu_rho = {nu_rho_value} is not positive"));
    }
    let alpha_bound = if smooth_only {
        1.0
    } else {
        (mu * nu_rho_value * (2.0 - spectrum.sigma_max - mu * constants.delta)).min(1.0)
    };
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= alpha_bound) {
        return unavailable(format!("alpha = {alpha} not in (0, {alpha_bound}]"));
    }

    let gamma1 = 1.0 - mu * nu_rho_value * (2.0 - spectrum.sigma_max - mu * constants.delta);
    let gamma2 = 1.0 - alpha * spectrum.sigma_under;
    let beta = 1.0 - alpha * spectrum.sigma_max;
    let gamma = if smooth_only { gamma1.max(gamma2) } else { (gamma1 / beta).max(gamma2) };
    if !(gamma > 0.0 && gamma < 1.0) {
        return unavailable(format!("contraction factor {gamma} escaped (0, 1)"));
    }
    Ok(RateCertificate {
        mu,
        alpha,
        rho,
        c,
        nu_rho: nu_rho_value,
        gamma1,
        gamma2,
        beta,
        gamma,
        smooth_only,
    })
}

/// How far a state is from satisfying the three fixed-point equations:
/// `stationarity` for the pre-prox equation, `consensus` for
/// `B^{1/2} z = 0`, `prox_consistency` for `w = prox(z)`, plus the largest
/// pairwise distance between agent rows of `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointReport {
    pub stationarity: f64,
    pub consensus: f64,
    pub prox_consistency: f64,
    pub z_spread: f64,
}

impl FixedPointReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity.max(self.consensus).max(self.prox_consistency)
    }
}

/// Evaluates the fixed-point residuals at `(w, z, y)`. When `y` is not
/// tracked, the minimum-norm least-squares dual is substituted, so the
/// stationarity residual measures only the component no dual can explain.
pub fn fixed_point_residual(
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: Option<&DMatrix<f64>>,
    costs: &[AgentCost],
    regularizer: &Regularizer,
    consensus: &ConsensusMatrix,
    mu: f64,
) -> Result<FixedPointReport, AnalysisError> {
    let b = consensus.matrix();
    let b_sqrt = consensus.sqrt();
    let grad = model::stacked_gradient(costs, w)?;
    // The pre-prox equation: z = w - mu grad(w) - B w - B^{1/2} y.
    let pre = w - mu * grad - b * w;
    let explained = match y {
        Some(y) => b_sqrt * y,
        None => b_sqrt * (consensus.sqrt_pinv() * (&pre - z)),
    };
    let stationarity = (z - &pre + explained).norm();
    let consensus_residual = (b_sqrt * z).norm();
    let prox_consistency = (w - prox::prox_matrix(regularizer, z, mu)?).norm();

    let mut z_spread: f64 = 0.0;
    for a in 0..z.nrows() {
        for b in (a + 1)..z.nrows() {
            z_spread = z_spread.max((z.row(a) - z.row(b)).norm());
        }
    }
    Ok(FixedPointReport { stationarity, consensus: consensus_residual, prox_consistency, z_spread })
}

/// Least-squares fit of `log(rel_sq_error)` against the iteration index over
/// the trailing `window` fraction of usable records. Returns
/// `(gamma_hat, r_squared)` with `gamma_hat = exp(slope)`.
pub fn fit_linear_rate(trace: &IterationTrace, window: f64) -> Result<(f64, f64), AnalysisError> {
    if !(window.is_finite() && window > 0.0 && window <= 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "window = {window} must be in (0, 1]"
        )));
    }
    let usable: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter_map(|r| {
            r.rel_sq_error.filter(|&e| e > RATE_FIT_FLOOR).map(|e| (r.iter as f64, e.ln()))
        })
        .collect();
    if usable.len() < 10 {
        return Err(AnalysisError::InsufficientData(usable.len()));
    }
    let count = ((usable.len() as f64 * window).ceil() as usize).clamp(2, usable.len());
    let points = &usable[usable.len() - count..];

    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };

    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 =
        points.iter().map(|p| (p.1 - (mean_y + slope * (p.0 - mean_x))).powi(2)).sum();
    let r_squared = if ss_tot <= 1e-30 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope.exp(), r_squared))
}

/// Squared weighted norm `sum_cols x' (I - alpha B) x` of a stacked matrix.
pub fn weighted_norm_sq(x: &DMatrix<f64>, consensus: &ConsensusMatrix, alpha: f64) -> f64 {
    x.norm_squared() - alpha * (consensus.matrix() * x).component_mul(x).sum()
}

/// Stacks one vector into every row.
pub fn replicate_rows(count: usize, v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(count, v.len(), |_, j| v[j])
}
