//! Per-agent smooth costs `J_k`, their gradients, the curvature constants
//! `delta` (gradient Lipschitz, max over agents) and `nu` (strong convexity
//! of the average cost), plus dataset partitioning and a synthetic sparse
//! logistic generator.
//!
//! Two cost kinds are supported. Logistic:
//! `J_k(w) = (lambda/2)||w||^2 + (1/L) sum_l ln(1 + exp(-y_l x_l' w))`.
//! Quadratic: `J_k(w) = (1/2) w' Q_k w - b_k' w + (lambda/2)||w||^2` with
//! `Q_k` symmetric PSD.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::seed;

/// Power-iteration convergence tolerance for spectral norms.
const POWER_ITERATION_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("average cost is not strongly convex (nu = {0})")]
    NotStronglyConvex(f64),
    #[error("{0} samples cannot cover {1} agents")]
    TooFewSamples(usize, usize),
    #[error("label {0} at row {1} is not +1 or -1")]
    InvalidLabel(f64, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quadratic matrix is not symmetric PSD: {0}")]
    NotPsd(String),
    #[error("cost list is empty")]
    EmptyCosts,
    #[error("cost kinds must match across agents")]
    MixedKinds,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A labeled binary-classification dataset; rows of `features` are samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    /// Whether feature rows have been scaled to unit Euclidean norm.
    pub row_normalized: bool,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self, ModelError> {
        if features.nrows() != labels.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("features"));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y != 1.0 && y != -1.0 {
                return Err(ModelError::InvalidLabel(y, i));
            }
        }
        Ok(Self { features, labels, row_normalized: false })
    }

    /// Scales every nonzero feature row to unit Euclidean norm.
    pub fn normalize_rows(&mut self) {
        for mut row in self.features.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        self.row_normalized = true;
    }

    pub fn num_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.features.ncols()
    }
}

/// Parses sparse classification data in the text format
/// `label index:value index:value ...` with 1-based, strictly increasing
/// indices. Raw labels at or below zero, and any label listed in
/// `negative_labels`, map to -1; everything else maps to +1. The feature
/// dimension is the largest index seen. With `normalize`, feature rows are
/// scaled to unit norm after loading.
pub fn read_libsvm(
    text: &str,
    negative_labels: &[f64],
    normalize: bool,
) -> Result<Dataset, ModelError> {
    let parse_err = |line: usize, message: String| ModelError::Parse { line, message };
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut dimension = 0usize;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.trim();
        if content.is_empty() {
            continue;
        }
        let mut fields = content.split_whitespace();
        let label_field = fields.next().expect("non-empty line has a first field");
        let raw_label: f64 = label_field
            .parse()
            .map_err(|_| parse_err(line, format!("unreadable label {label_field:?}")))?;
        if !raw_label.is_finite() {
            return Err(parse_err(line, format!("non-finite label {raw_label}")));
        }
        let negative = raw_label <= 0.0 || negative_labels.contains(&raw_label);
        labels.push(if negative { -1.0 } else { 1.0 });

        let mut entries: Vec<(usize, f64)> = Vec::new();
        for field in fields {
            let (index_text, value_text) = field
                .split_once(':')
                .ok_or_else(|| parse_err(line, format!("feature {field:?} is not index:value")))?;
            let index: usize = index_text
                .parse()
                .map_err(|_| parse_err(line, format!("unreadable index {index_text:?}")))?;
            if index == 0 {
                return Err(parse_err(line, "indices are 1-based, found 0".into()));
            }
            let value: f64 = value_text
                .parse()
                .map_err(|_| parse_err(line, format!("unreadable value {value_text:?}")))?;
            if !value.is_finite() {
                return Err(parse_err(line, format!("non-finite value at index {index}")));
            }
            if let Some(&(last, _)) = entries.last() {
                if index <= last {
                    return Err(parse_err(
                        line,
                        format!("index {index} does not increase past {last}"),
                    ));
                }
            }
            entries.push((index, value));
            dimension = dimension.max(index);
        }
        rows.push(entries);
    }
    if rows.is_empty() {
        return Err(parse_err(0, "no samples".into()));
    }

    let mut features = DMatrix::zeros(rows.len(), dimension);
    for (r, entries) in rows.iter().enumerate() {
        for &(index, value) in entries {
            features[(r, index - 1)] = value;
        }
    }
    let mut dataset = Dataset::new(features, DVector::from_vec(labels))?;
    if normalize {
        dataset.normalize_rows();
    }
    Ok(dataset)
}

/// One agent's smooth cost.
#[derive(Debug, Clone)]
pub enum AgentCost {
    Logistic { features: DMatrix<f64>, labels: DVector<f64>, lambda: f64 },
    Quadratic { q: DMatrix<f64>, b: DVector<f64>, lambda: f64 },
}

impl AgentCost {
    pub fn logistic(
        features: DMatrix<f64>,
        labels: DVector<f64>,
        lambda: f64,
    ) -> Result<Self, ModelError> {
        let data = Dataset::new(features, labels)?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ModelError::NonFinite("lambda"));
        }
        Ok(Self::Logistic { features: data.features, labels: data.labels, lambda })
    }

    pub fn quadratic(q: DMatrix<f64>, b: DVector<f64>, lambda: f64) -> Result<Self, ModelError> {
        let m = q.nrows();
        if q.ncols() != m || b.len() != m {
            return Err(ModelError::DimensionMismatch(format!(
                "Q is {}x{}, b has length {}",
                q.nrows(),
                q.ncols(),
                b.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("quadratic data"));
        }
        let asym = (&q - q.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(ModelError::NotPsd(format!("asymmetry {asym}")));
        }
        let min_eig = DMatrix::symmetric_eigen(q.clone()).eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(ModelError::NotPsd(format!("eigenvalue {min_eig}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ModelError::NonFinite("lambda"));
        }
        Ok(Self::Quadratic { q, b, lambda })
    }

    pub fn dimension(&self) -> usize {
        match self {
            AgentCost::Logistic { features, .. } => features.ncols(),
            AgentCost::Quadratic { q, .. } => q.nrows(),
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            AgentCost::Logistic { lambda, .. } | AgentCost::Quadratic { lambda, .. } => *lambda,
        }
    }

    /// `∇J_k(w)`.
    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        if w.len() != self.dimension() {
            return Err(ModelError::DimensionMismatch(format!(
                "w has length {}, cost dimension is {}",
                w.len(),
                self.dimension()
            )));
        }
        match self {
            AgentCost::Logistic { features, labels, lambda } => {
                let num = features.nrows() as f64;
                let margins = features * w;
                let mut g = w * *lambda;
                for l in 0..features.nrows() {
                    // d/dw softplus(-y x'w) = -y x sigmoid(-y x'w)
                    let s = sigmoid(-labels[l] * margins[l]);
                    let coeff = -labels[l] * s / num;
                    g.axpy(coeff, &features.row(l).transpose(), 1.0);
                }
                Ok(g)
            }
            AgentCost::Quadratic { q, b, lambda } => Ok(q * w - b + *lambda * w),
        }
    }

    /// `J_k(w)`.
    pub fn loss(&self, w: &DVector<f64>) -> Result<f64, ModelError> {
        if w.len() != self.dimension() {
            return Err(ModelError::DimensionMismatch(format!(
                "w has length {}, cost dimension is {}",
                w.len(),
                self.dimension()
            )));
        }
        match self {
            AgentCost::Logistic { features, labels, lambda } => {
                let margins = features * w;
                let data: f64 =
                    (0..features.nrows()).map(|l| softplus(-labels[l] * margins[l])).sum::<f64>()
                        / features.nrows() as f64;
                Ok(data + 0.5 * lambda * w.norm_squared())
            }
            AgentCost::Quadratic { q, b, lambda } => {
                Ok(0.5 * w.dot(&(q * w)) - b.dot(w) + 0.5 * lambda * w.norm_squared())
            }
        }
    }

    /// Upper bound on the Lipschitz constant of this agent's gradient.
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            AgentCost::Logistic { features, lambda, .. } => {
                let gram = features.transpose() * features;
                lambda + spectral_norm_psd(&gram) / (4.0 * features.nrows() as f64)
            }
            AgentCost::Quadratic { q, lambda, .. } => spectral_norm_psd(q) + lambda,
        }
    }
}

/// Numerically stable `1 / (1 + exp(-t))`.
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(t))`.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// deterministic seeded start.
fn spectral_norm_psd(g: &DMatrix<f64>) -> f64 {
    let m = g.nrows();
    if m == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut v = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..10_000 {
        let gv = g * &v;
        let norm = gv.norm();
        if norm < 1e-300 {
            return 0.0;
        }
        v = gv / norm;
        let next = v.dot(&(g * &v));
        if (next - estimate).abs() <= POWER_ITERATION_TOL * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Curvature constants shared by the certificates: `delta` bounds every
/// agent's gradient Lipschitz constant, `nu` lower-bounds the strong
/// convexity of the average cost, and `0 < nu <= delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConstants {
    pub delta: f64,
    pub nu: f64,
}

/// Estimates `(delta, nu)` for a homogeneous cost list. Logistic agents get
/// `nu = lambda` (the data term's curvature is left unmodeled, which keeps
/// the bound valid); quadratic agents get the exact smallest eigenvalue of
/// the average Hessian.
pub fn estimate_constants(costs: &[AgentCost]) -> Result<CostConstants, ModelError> {
    let (delta, nu) = match costs {
        [] => return Err(ModelError::EmptyCosts),
        [AgentCost::Logistic { .. }, ..] => {
            if !costs.iter().all(|c| matches!(c, AgentCost::Logistic { .. })) {
                return Err(ModelError::MixedKinds);
            }
            let delta =
                costs.iter().map(AgentCost::lipschitz_bound).fold(f64::NEG_INFINITY, f64::max);
            (delta, costs[0].lambda())
        }
        [AgentCost::Quadratic { .. }, ..] => {
            let m = costs[0].dimension();
            let mut q_avg = DMatrix::zeros(m, m);
            for cost in costs {
                let AgentCost::Quadratic { q, .. } = cost else {
                    return Err(ModelError::MixedKinds);
                };
                q_avg += q;
            }
            q_avg /= costs.len() as f64;
            let delta =
                costs.iter().map(AgentCost::lipschitz_bound).fold(f64::NEG_INFINITY, f64::max);
            let nu = DMatrix::symmetric_eigen(q_avg).eigenvalues.min() + costs[0].lambda();
            (delta, nu)
        }
    };
    if nu <= 0.0 {
        return Err(ModelError::NotStronglyConvex(nu));
    }
    Ok(CostConstants { delta, nu })
}

/// `(1/K) sum_k ∇J_k(w)`.
pub fn average_gradient(costs: &[AgentCost], w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    if costs.is_empty() {
        return Err(ModelError::EmptyCosts);
    }
    let mut g = DVector::zeros(w.len());
    for cost in costs {
        g += cost.gradient(w)?;
    }
    Ok(g / costs.len() as f64)
}

/// `(1/K) sum_k J_k(w)`.
pub fn average_loss(costs: &[AgentCost], w: &DVector<f64>) -> Result<f64, ModelError> {
    if costs.is_empty() {
        return Err(ModelError::EmptyCosts);
    }
    let total: f64 = costs.iter().map(|c| c.loss(w)).sum::<Result<f64, _>>()?;
    Ok(total / costs.len() as f64)
}

/// Upper bound on the Lipschitz constant of the average gradient, taken as
/// the average of the per-agent bounds (the average Hessian is dominated by
/// the average of the per-agent dominating matrices).
pub fn average_lipschitz(costs: &[AgentCost]) -> Result<f64, ModelError> {
    if costs.is_empty() {
        return Err(ModelError::EmptyCosts);
    }
    Ok(costs.iter().map(AgentCost::lipschitz_bound).sum::<f64>() / costs.len() as f64)
}

/// Row `k` of the result is `∇J_k` evaluated at row `k` of the stacked
/// iterate matrix. Agents are evaluated in parallel; the output layout is
/// fixed by agent index, so results do not depend on the thread count.
pub fn stacked_gradient(costs: &[AgentCost], w: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    if w.nrows() != costs.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} iterate rows vs {} agents",
            w.nrows(),
            costs.len()
        )));
    }
    let rows: Vec<DVector<f64>> = (0..costs.len())
        .into_par_iter()
        .map(|k| costs[k].gradient(&w.row(k).transpose()))
        .collect::<Result<_, _>>()?;
    Ok(DMatrix::from_fn(costs.len(), w.ncols(), |k, j| rows[k][j]))
}

/// Splits a dataset into `K` logistic agent costs by a seeded shuffle.
/// Sizes are as even as possible: the first `L mod K` agents receive one
/// extra sample.
pub fn partition(
    dataset: &Dataset,
    num_agents: usize,
    lambda: f64,
    seed_value: u64,
) -> Result<Vec<AgentCost>, ModelError> {
    let total = dataset.num_samples();
    if num_agents == 0 || total < num_agents {
        return Err(ModelError::TooFewSamples(total, num_agents));
    }
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    indices.shuffle(&mut rng);

    let base = total / num_agents;
    let extra = total % num_agents;
    let mut costs = Vec::with_capacity(num_agents);
    let mut cursor = 0;
    for k in 0..num_agents {
        let size = base + usize::from(k < extra);
        let rows = &indices[cursor..cursor + size];
        cursor += size;
        let features =
            DMatrix::from_fn(size, dataset.dimension(), |r, c| dataset.features[(rows[r], c)]);
        let labels = DVector::from_fn(size, |r, _| dataset.labels[rows[r]]);
        costs.push(AgentCost::logistic(features, labels, lambda)?);
    }
    Ok(costs)
}

/// The generator's ground truth: the planted sparse vector and how many
/// labels were flipped by noise.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub w: DVector<f64>,
    pub label_flips: usize,
}

/// Synthesizes a sparse logistic-regression instance: Gaussian feature rows
/// scaled to unit norm, labels from the sign of the planted-model margin,
/// then flipped independently with probability `noise_level`. Deterministic
/// per seed; the planted vector, features, labels, and noise each draw from
/// a named substream.
pub fn synthesize_logistic(
    num_agents: usize,
    samples_per_agent: usize,
    dimension: usize,
    num_nonzero: usize,
    noise_level: f64,
    lambda: f64,
    seed_value: u64,
) -> Result<(Vec<AgentCost>, PlantedModel), ModelError> {
    if num_agents == 0 || samples_per_agent == 0 || dimension == 0 {
        return Err(ModelError::DimensionMismatch(
            "agents, samples, and dimension must be positive".into(),
        ));
    }
    let nnz = num_nonzero.clamp(1, dimension);

    let mut planted = DVector::zeros(dimension);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "planted"));
        let mut coords: Vec<usize> = (0..dimension).collect();
        coords.shuffle(&mut rng);
        for &c in coords.iter().take(nnz) {
            planted[c] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut label_flips = 0;
    let mut costs = Vec::with_capacity(num_agents);
    for k in 0..num_agents {
        let mut feat_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed_value, "features", k as u64));
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed_value, "noise", k as u64));
        let mut features = DMatrix::from_fn(samples_per_agent, dimension, |_, _| {
            feat_rng.sample::<f64, _>(StandardNormal)
        });
        for mut row in features.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let margins = &features * &planted;
        let labels = DVector::from_fn(samples_per_agent, |l, _| {
            let clean = if margins[l] >= 0.0 { 1.0 } else { -1.0 };
            if noise_rng.random::<f64>() < noise_level {
                label_flips += 1;
                -clean
            } else {
                clean
            }
        });
        costs.push(AgentCost::logistic(features, labels, lambda)?);
    }
    Ok((costs, PlantedModel { w: planted, label_flips }))
}

/// Quadratic analog of [`synthesize_logistic`]: agent `k` draws Gaussian
/// feature rows `X_k`, sets `Q_k = X_k' X_k / L` and
/// `b_k = Q_k w_planted + noise`, so with the zero regularizer and
/// `noise_level = 0` the average cost is minimized exactly at the planted
/// vector. Deterministic per seed with the same substream layout as the
/// logistic generator; `label_flips` is always zero here.
pub fn synthesize_quadratic(
    num_agents: usize,
    samples_per_agent: usize,
    dimension: usize,
    num_nonzero: usize,
    noise_level: f64,
    lambda: f64,
    seed_value: u64,
) -> Result<(Vec<AgentCost>, PlantedModel), ModelError> {
    if num_agents == 0 || samples_per_agent == 0 || dimension == 0 {
        return Err(ModelError::DimensionMismatch(
            "agents, samples, and dimension must be positive".into(),
        ));
    }
    let nnz = num_nonzero.clamp(1, dimension);

    let mut planted = DVector::zeros(dimension);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "planted"));
        let mut coords: Vec<usize> = (0..dimension).collect();
        coords.shuffle(&mut rng);
        for &c in coords.iter().take(nnz) {
            planted[c] = rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut costs = Vec::with_capacity(num_agents);
    for k in 0..num_agents {
        let mut feat_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed_value, "features", k as u64));
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed_value, "noise", k as u64));
        let features = DMatrix::from_fn(samples_per_agent, dimension, |_, _| {
            feat_rng.sample::<f64, _>(StandardNormal)
        });
        let q = features.transpose() * &features / samples_per_agent as f64;
        let mut b = &q * &planted;
        if noise_level > 0.0 {
            for v in b.iter_mut() {
                *v += noise_level * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        costs.push(AgentCost::quadratic(q, b, lambda)?);
    }
    Ok((costs, PlantedModel { w: planted, label_flips: 0 }))
}
