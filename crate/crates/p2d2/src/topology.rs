//! Network graphs, doubly stochastic combination matrices, and the consensus
//! matrix `B = (1/2)(I - A)` together with its spectral quantities.
//!
//! Everything here is agent-level: matrices are `K x K` and act on stacked
//! `K x M` iterate matrices blockwise (row `k` holds agent `k`'s vector), which
//! is equivalent to the Kronecker extension with the `M x M` identity without
//! ever materializing a `KM x KM` operator.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed;

/// Symmetry / double-stochasticity tolerance for combination matrices.
pub const MATRIX_TOL: f64 = 1e-12;
/// Eigenvalues of `B` below this threshold count as the null space.
pub const ZERO_EIGENVALUE_THRESHOLD: f64 = 1e-10;
/// Retry budget for random connected graph generation.
const MAX_GENERATION_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("graph is not connected")]
    DisconnectedGraph,
    #[error("need at least 2 agents, got {0}")]
    EmptyGraph(usize),
    #[error("edge ({0}, {1}) invalid for {2} agents")]
    InvalidEdge(usize, usize, usize),
    #[error("edge ({0}, {1}) listed more than once")]
    DuplicateEdge(usize, usize),
    #[error("no connected graph after {0} attempts")]
    GenerationExhausted(usize),
    #[error("combination matrix rejected: {0}")]
    InvalidMatrix(String),
    #[error("eigendecomposition failed")]
    NumericalFailure,
    #[error("all eigenvalues below the zero threshold")]
    DegenerateSpectrum,
}

/// An undirected network of `K` agents. Self-loops are implicit (every agent
/// always hears itself) and never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_agents: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from unordered agent pairs. Duplicate edges and
    /// self-loops are rejected; connectivity is checked where it matters
    /// (weight generation), not here.
    pub fn new(
        num_agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        let mut normalized = Vec::new();
        for (a, b) in edges {
            if a == b || a >= num_agents || b >= num_agents {
                return Err(TopologyError::InvalidEdge(a, b, num_agents));
            }
            normalized.push((a.min(b), a.max(b)));
        }
        normalized.sort_unstable();
        if let Some(w) = normalized.windows(2).find(|w| w[0] == w[1]) {
            return Err(TopologyError::DuplicateEdge(w[0].0, w[0].1));
        }
        Ok(Self { num_agents, edges: normalized })
    }

    pub fn path(num_agents: usize) -> Result<Self, TopologyError> {
        Self::new(num_agents, (1..num_agents).map(|k| (k - 1, k)))
    }

    pub fn ring(num_agents: usize) -> Result<Self, TopologyError> {
        if num_agents < 3 {
            return Self::path(num_agents);
        }
        let mut edges: Vec<_> = (1..num_agents).map(|k| (k - 1, k)).collect();
        edges.push((0, num_agents - 1));
        Self::new(num_agents, edges)
    }

    pub fn complete(num_agents: usize) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for a in 0..num_agents {
            for b in (a + 1)..num_agents {
                edges.push((a, b));
            }
        }
        Self::new(num_agents, edges)
    }

    /// Erdos-Renyi draw retried with freshly derived attempt seeds until
    /// connected. Deterministic for a fixed `(num_agents, edge_prob, seed)`.
    pub fn random_connected(
        num_agents: usize,
        edge_prob: f64,
        master_seed: u64,
    ) -> Result<Self, TopologyError> {
        if num_agents < 2 {
            return Err(TopologyError::EmptyGraph(num_agents));
        }
        if !(edge_prob > 0.0 && edge_prob <= 1.0) {
            return Err(TopologyError::InvalidMatrix(format!(
                "edge probability {edge_prob} outside (0, 1]"
            )));
        }
        for attempt in 0..MAX_GENERATION_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
                master_seed,
                "graph",
                attempt as u64,
            ));
            let mut edges = Vec::new();
            for a in 0..num_agents {
                for b in (a + 1)..num_agents {
                    if rng.random::<f64>() < edge_prob {
                        edges.push((a, b));
                    }
                }
            }
            let graph = Self::new(num_agents, edges)?;
            if graph.is_connected() {
                return Ok(graph);
            }
        }
        Err(TopologyError::GenerationExhausted(MAX_GENERATION_ATTEMPTS))
    }

    /// Recovers the graph implied by the off-diagonal sparsity pattern of a
    /// combination matrix (entries larger than [`MATRIX_TOL`] in magnitude).
    pub fn from_pattern(matrix: &DMatrix<f64>) -> Result<Self, TopologyError> {
        let k = matrix.nrows();
        let mut edges = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                if matrix[(a, b)].abs() > MATRIX_TOL || matrix[(b, a)].abs() > MATRIX_TOL {
                    edges.push((a, b));
                }
            }
        }
        Self::new(k, edges)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == agent || b == agent).count()
    }

    /// Neighbor lists in ascending agent order, excluding the agent itself.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_agents];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.num_agents == 0 {
            return false;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.num_agents];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.num_agents
    }
}

/// Symmetric doubly stochastic weight matrix `A = [a_sk]` whose sparsity
/// pattern matches a network graph.
#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    matrix: DMatrix<f64>,
    /// Smallest power `p <= K` with all entries of `A^p` strictly positive.
    /// Its existence is what makes repeated averaging mix; verified at
    /// construction, reported for diagnostics, never consumed downstream.
    primitivity_power: usize,
}

impl CombinationMatrix {
    /// Metropolis rule: `a_sk = 1 / (1 + max(deg(s), deg(k)))` per edge, with
    /// the diagonal absorbing the slack so every row sums to one.
    pub fn metropolis(graph: &Graph) -> Result<Self, TopologyError> {
        let k = graph.num_agents();
        if k < 2 {
            return Err(TopologyError::EmptyGraph(k));
        }
        if !graph.is_connected() {
            return Err(TopologyError::DisconnectedGraph);
        }
        let mut a = DMatrix::zeros(k, k);
        for &(s, t) in graph.edges() {
            let w = 1.0 / (1.0 + graph.degree(s).max(graph.degree(t)) as f64);
            a[(s, t)] = w;
            a[(t, s)] = w;
        }
        for d in 0..k {
            let off: f64 = a.row(d).sum();
            a[(d, d)] = 1.0 - off;
        }
        Self::from_matrix(a, Some(graph))
    }

    /// Validates and wraps a user-provided weight matrix: symmetry and double
    /// stochasticity within [`MATRIX_TOL`], eigenvalues in `(-1, 1]`, pattern
    /// match against `graph` when given, and primitivity up to power `K`.
    pub fn from_matrix(matrix: DMatrix<f64>, graph: Option<&Graph>) -> Result<Self, TopologyError> {
        let k = matrix.nrows();
        if k == 0 || matrix.ncols() != k {
            return Err(TopologyError::InvalidMatrix(format!(
                "expected square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(TopologyError::InvalidMatrix("non-finite entry".into()));
        }
        for s in 0..k {
            for t in (s + 1)..k {
                if (matrix[(s, t)] - matrix[(t, s)]).abs() > MATRIX_TOL {
                    return Err(TopologyError::InvalidMatrix(format!("asymmetric at ({s}, {t})")));
                }
            }
        }
        for s in 0..k {
            let row_sum: f64 = matrix.row(s).sum();
            if (row_sum - 1.0).abs() > MATRIX_TOL {
                return Err(TopologyError::InvalidMatrix(format!(
                    "row {s} sums to {row_sum}, not 1"
                )));
            }
        }
        if let Some(graph) = graph {
            if graph.num_agents() != k {
                return Err(TopologyError::InvalidMatrix(format!(
                    "graph has {} agents but matrix is {k}x{k}",
                    graph.num_agents()
                )));
            }
            let adj = graph.adjacency();
            for s in 0..k {
                for t in 0..k {
                    if s != t && matrix[(s, t)].abs() > MATRIX_TOL && !adj[s].contains(&t) {
                        return Err(TopologyError::InvalidMatrix(format!(
                            "weight at ({s}, {t}) has no supporting edge"
                        )));
                    }
                }
            }
        }
        let eig = DMatrix::symmetric_eigen(matrix.clone());
        let min_eig = eig.eigenvalues.min();
        let max_eig = eig.eigenvalues.max();
        if min_eig <= -1.0 + MATRIX_TOL || max_eig > 1.0 + MATRIX_TOL {
            return Err(TopologyError::InvalidMatrix(format!(
                "eigenvalues [{min_eig}, {max_eig}] outside (-1, 1]"
            )));
        }
        let Some(primitivity_power) = primitivity_power(&matrix) else {
            return Err(TopologyError::InvalidMatrix(format!(
                "pattern not strictly positive by power {k} (not primitive)"
            )));
        };
        Ok(Self { matrix, primitivity_power })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_agents(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn primitivity_power(&self) -> usize {
        self.primitivity_power
    }
}

/// Smallest `p <= K` with `A^p` entrywise positive, tracked on the boolean
/// sparsity pattern (band growth, not magnitudes).
fn primitivity_power(matrix: &DMatrix<f64>) -> Option<usize> {
    let k = matrix.nrows();
    let pattern: Vec<Vec<bool>> =
        (0..k).map(|s| (0..k).map(|t| matrix[(s, t)].abs() > MATRIX_TOL).collect()).collect();
    let mut power = pattern.clone();
    for p in 1..=k {
        if power.iter().all(|row| row.iter().all(|&x| x)) {
            return Some(p);
        }
        if p == k {
            break;
        }
        let mut next = vec![vec![false; k]; k];
        #[allow(clippy::needless_range_loop)]
        for s in 0..k {
            for mid in 0..k {
                if power[s][mid] {
                    for t in 0..k {
                        if pattern[mid][t] {
                            next[s][t] = true;
                        }
                    }
                }
            }
        }
        power = next;
    }
    None
}

/// Largest and smallest *nonzero* eigenvalue of `B`; both live in `(0, 1)`
/// for a connected graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralBounds {
    pub sigma_max: f64,
    pub sigma_under: f64,
}

/// The consensus matrix `B = (1/2)(I - A)`: symmetric PSD with eigenvalues in
/// `[0, 1)` and, for connected graphs, a null space spanned by the all-ones
/// vector. The symmetric square root and its pseudo-inverse are computed on
/// demand (only the primal-dual reference recursion needs them) and cached.
#[derive(Debug)]
pub struct ConsensusMatrix {
    matrix: DMatrix<f64>,
    eigen: OnceLock<(DVector<f64>, DMatrix<f64>)>,
    sqrt: OnceLock<DMatrix<f64>>,
    sqrt_pinv: OnceLock<DMatrix<f64>>,
}

impl ConsensusMatrix {
    pub fn from_combination(combination: &CombinationMatrix) -> Self {
        let k = combination.num_agents();
        let b = (DMatrix::identity(k, k) - combination.matrix()) * 0.5;
        Self {
            matrix: b,
            eigen: OnceLock::new(),
            sqrt: OnceLock::new(),
            sqrt_pinv: OnceLock::new(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_agents(&self) -> usize {
        self.matrix.nrows()
    }

    fn eigen(&self) -> &(DVector<f64>, DMatrix<f64>) {
        self.eigen.get_or_init(|| {
            let eig = DMatrix::symmetric_eigen(self.matrix.clone());
            (eig.eigenvalues, eig.eigenvectors)
        })
    }

    /// Symmetric square root from the eigendecomposition. Eigenvalues below
    /// [`ZERO_EIGENVALUE_THRESHOLD`] are treated as exact zeros (the same
    /// rank decision as [`Self::sqrt_pinv`]): rounding noise of order 1e-16
    /// in a null eigenvalue would otherwise surface as a 1e-8 root and leak
    /// the consensus direction into the square root's range.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        self.sqrt.get_or_init(|| {
            let (values, vectors) = self.eigen();
            let roots = DVector::from_iterator(
                values.len(),
                values.iter().map(|&v| if v > ZERO_EIGENVALUE_THRESHOLD { v.sqrt() } else { 0.0 }),
            );
            vectors * DMatrix::from_diagonal(&roots) * vectors.transpose()
        })
    }

    /// Moore-Penrose pseudo-inverse of `sqrt()`; applying it to a right-hand
    /// side gives the minimum-norm least-squares solution of
    /// `B^{1/2} y = rhs`, which lands in the range space of `B^{1/2}`.
    pub fn sqrt_pinv(&self) -> &DMatrix<f64> {
        self.sqrt_pinv.get_or_init(|| {
            let (values, vectors) = self.eigen();
            let inv = DVector::from_iterator(
                values.len(),
                values.iter().map(|&v| {
                    if v > ZERO_EIGENVALUE_THRESHOLD {
                        1.0 / v.max(0.0).sqrt()
                    } else {
                        0.0
                    }
                }),
            );
            vectors * DMatrix::from_diagonal(&inv) * vectors.transpose()
        })
    }

    /// Sorted eigenvalues of `B` (ascending).
    pub fn eigenvalues(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.eigen().0.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        DVector::from_vec(v)
    }

    /// `sigma_max` and the smallest eigenvalue strictly above the zero
    /// threshold. Fails with [`TopologyError::DegenerateSpectrum`] when no
    /// eigenvalue clears the threshold (e.g. a single-agent network).
    pub fn spectral_bounds(&self) -> Result<SpectralBounds, TopologyError> {
        let (values, _) = self.eigen();
        let sigma_max = values.max();
        let sigma_under = values
            .iter()
            .copied()
            .filter(|&v| v > ZERO_EIGENVALUE_THRESHOLD)
            .fold(f64::INFINITY, f64::min);
        if !sigma_under.is_finite() {
            return Err(TopologyError::DegenerateSpectrum);
        }
        Ok(SpectralBounds { sigma_max, sigma_under })
    }
}

/// A validated topology bundle: graph, combination matrix, and consensus
/// matrix together. Immutable after construction and safe to share.
#[derive(Debug)]
pub struct Network {
    pub graph: Graph,
    pub combination: CombinationMatrix,
    pub consensus: ConsensusMatrix,
}

impl Network {
    pub fn metropolis(graph: Graph) -> Result<Self, TopologyError> {
        let combination = CombinationMatrix::metropolis(&graph)?;
        let consensus = ConsensusMatrix::from_combination(&combination);
        Ok(Self { graph, combination, consensus })
    }

    /// Degenerate one-agent network with `A = I`, hence `B = 0`: the
    /// algorithm collapses to centralized proximal gradient descent.
    pub fn single_agent() -> Result<Self, TopologyError> {
        let graph = Graph::new(1, std::iter::empty())?;
        let combination = CombinationMatrix::from_matrix(DMatrix::identity(1, 1), Some(&graph))?;
        Ok(Self::from_combination(graph, combination))
    }

    pub fn from_combination(graph: Graph, combination: CombinationMatrix) -> Self {
        let consensus = ConsensusMatrix::from_combination(&combination);
        Self { graph, combination, consensus }
    }

    pub fn num_agents(&self) -> usize {
        self.graph.num_agents()
    }
}
