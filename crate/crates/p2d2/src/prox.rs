//! The shared nonsmooth regularizer `R` and its proximal operator
//! `prox_{mu R}(z) = argmin_v R(v) + ||v - z||^2 / (2 mu)`.
//!
//! Every supported kind separates across coordinates, so vector and matrix
//! proxes are entrywise maps of a scalar rule. The subgradient witness turns
//! the inclusion `(z - w)/mu ∈ ∂R(w)` into a measurable distance, which is
//! what fixed-point reports quote.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProxError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Regularizer choices. Parameters must be nonnegative; the kind is common to
/// all agents for the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    /// `R = 0`; the prox is the identity.
    Zero,
    /// `R(w) = rho * ||w||_1`; the prox is the soft threshold at `mu * rho`.
    L1 { rho: f64 },
    /// `R(w) = rho1 * ||w||_1 + (rho2 / 2) * ||w||^2`; the prox soft
    /// thresholds at `mu * rho1` and then scales by `1 / (1 + mu * rho2)`.
    /// The order matters and is fixed by the closed-form derivation.
    ElasticNet { rho1: f64, rho2: f64 },
    /// Indicator of the nonnegative orthant; the prox clips at zero.
    NonnegIndicator,
}

impl Regularizer {
    pub fn validate(&self) -> Result<(), ProxError> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ProxError::InvalidParameter(format!("{name} = {v} must be >= 0")))
            }
        };
        match *self {
            Regularizer::Zero | Regularizer::NonnegIndicator => Ok(()),
            Regularizer::L1 { rho } => check("rho", rho),
            Regularizer::ElasticNet { rho1, rho2 } => {
                check("rho1", rho1)?;
                check("rho2", rho2)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Regularizer::Zero)
    }

    fn prox_scalar(&self, v: f64, mu: f64) -> f64 {
        match *self {
            Regularizer::Zero => v,
            Regularizer::L1 { rho } => soft_threshold(v, mu * rho),
            Regularizer::ElasticNet { rho1, rho2 } => {
                soft_threshold(v, mu * rho1) / (1.0 + mu * rho2)
            }
            Regularizer::NonnegIndicator => v.max(0.0),
        }
    }

    /// `R(w)`; infinite outside the domain of an indicator kind.
    pub fn value(&self, w: &DVector<f64>) -> f64 {
        match *self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { rho } => rho * w.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::ElasticNet { rho1, rho2 } => {
                rho1 * w.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * rho2 * w.norm_squared()
            }
            Regularizer::NonnegIndicator => {
                if w.iter().all(|&v| v >= 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

fn check_mu(mu: f64) -> Result<(), ProxError> {
    if mu.is_finite() && mu > 0.0 {
        Ok(())
    } else {
        Err(ProxError::InvalidParameter(format!("mu = {mu} must be > 0")))
    }
}

/// Proximal operator on a vector.
pub fn prox(spec: &Regularizer, z: &DVector<f64>, mu: f64) -> Result<DVector<f64>, ProxError> {
    check_mu(mu)?;
    spec.validate()?;
    Ok(z.map(|v| spec.prox_scalar(v, mu)))
}

/// Proximal operator applied to every entry of a stacked `K x M` iterate
/// matrix; equals the rowwise prox because every kind is coordinatewise.
pub fn prox_matrix(
    spec: &Regularizer,
    z: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>, ProxError> {
    check_mu(mu)?;
    spec.validate()?;
    Ok(z.map(|v| spec.prox_scalar(v, mu)))
}

/// Distance from `u = (z - w)/mu` to the subdifferential `∂R(w)`.
///
/// Zero certifies `w = prox_{mu R}(z)`. The distance has a closed form per
/// kind because each subdifferential is a coordinatewise interval:
/// for the l1 part it is `{rho * sign(w_j)}` off zero and `[-rho, rho]` at
/// zero; the elastic-net quadratic shifts the target by `rho2 * w_j`; the
/// nonnegative indicator contributes `(-inf, 0]` at the boundary and is empty
/// (infinite distance) at infeasible points.
pub fn subgradient_witness(
    spec: &Regularizer,
    w: &DVector<f64>,
    z: &DVector<f64>,
    mu: f64,
) -> Result<f64, ProxError> {
    check_mu(mu)?;
    spec.validate()?;
    let mut sum_sq = 0.0;
    for j in 0..w.len() {
        let u = (z[j] - w[j]) / mu;
        let d = match *spec {
            Regularizer::Zero => u.abs(),
            Regularizer::L1 { rho } => interval_distance(u, w[j], rho),
            Regularizer::ElasticNet { rho1, rho2 } => {
                interval_distance(u - rho2 * w[j], w[j], rho1)
            }
            Regularizer::NonnegIndicator => {
                if w[j] > 0.0 {
                    u.abs()
                } else if w[j] == 0.0 {
                    u.max(0.0)
                } else {
                    return Ok(f64::INFINITY);
                }
            }
        };
        sum_sq += d * d;
    }
    Ok(sum_sq.sqrt())
}

/// Distance of `u` from the l1 subdifferential interval at coordinate value
/// `w` with weight `rho`.
fn interval_distance(u: f64, w: f64, rho: f64) -> f64 {
    if w > 0.0 {
        (u - rho).abs()
    } else if w < 0.0 {
        (u + rho).abs()
    } else {
        (u.abs() - rho).max(0.0)
    }
}
