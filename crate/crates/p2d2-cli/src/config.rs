//! The JSON experiment schema and its field-level validation.
//!
//! Serde handles shape errors (missing fields, unknown fields, wrong types);
//! [`RunConfig::validate`] adds the range checks the schema cannot express.
//! Every validation message names the offending field, because the harness
//! surfaces it verbatim as the config error.

use std::path::PathBuf;

use p2d2::prox::Regularizer;
use p2d2::seed;
use p2d2::solver::SolverForm;
use p2d2::topology::{Graph, TopologyError};
use serde::Deserialize;

fn default_true() -> bool {
    true
}

fn default_safety() -> f64 {
    0.5
}

/// One experiment, exactly as written in the config file. The master `seed`
/// feeds named substreams (`graph`, `data`), so a config pins every random
/// choice and reruns are byte-identical.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub graph: GraphSpec,
    pub data: DataSpec,
    pub cost: CostSpec,
    pub regularizer: RegSpec,
    pub form: FormSpec,
    pub steps: StepsSpec,
    pub max_iters: usize,
    /// Relative-error stop; 0 (the default) disables early stopping.
    #[serde(default)]
    pub tol: f64,
    /// Where `run` writes the CSV trace; other subcommands ignore it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Optional destination for the final stacked iterate as a CSV matrix.
    #[serde(default)]
    pub final_w: Option<PathBuf>,
}

/// Topology choice. `K` is the number of agents; weights are always
/// Metropolis.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Path {
        #[serde(rename = "K")]
        k: usize,
    },
    Ring {
        #[serde(rename = "K")]
        k: usize,
    },
    Complete {
        #[serde(rename = "K")]
        k: usize,
    },
    Random {
        #[serde(rename = "K")]
        k: usize,
        p: f64,
    },
}

impl GraphSpec {
    pub fn num_agents(&self) -> usize {
        match *self {
            GraphSpec::Path { k }
            | GraphSpec::Ring { k }
            | GraphSpec::Complete { k }
            | GraphSpec::Random { k, .. } => k,
        }
    }

    /// Builds the graph; only the random kind consumes the seed.
    pub fn build(&self, seed_value: u64) -> Result<Graph, TopologyError> {
        match *self {
            GraphSpec::Path { k } => Graph::path(k),
            GraphSpec::Ring { k } => Graph::ring(k),
            GraphSpec::Complete { k } => Graph::complete(k),
            GraphSpec::Random { k, p } => Graph::random_connected(k, p, seed_value),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            GraphSpec::Path { k } => format!("path K={k}"),
            GraphSpec::Ring { k } => format!("ring K={k}"),
            GraphSpec::Complete { k } => format!("complete K={k}"),
            GraphSpec::Random { k, p } => format!("random K={k} p={p}"),
        }
    }
}

/// Data source: a planted synthetic instance or a LIBSVM text file split
/// across the agents.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        samples_per_agent: usize,
        dimension: usize,
        num_nonzero: usize,
        #[serde(default)]
        noise_level: f64,
    },
    Libsvm {
        path: PathBuf,
        /// Raw label values mapped to -1 in addition to everything <= 0.
        #[serde(default)]
        negative_labels: Vec<f64>,
        /// Scale feature rows to unit norm (the usual preprocessing).
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

impl DataSpec {
    pub fn describe(&self) -> String {
        match self {
            DataSpec::Synthetic { samples_per_agent, dimension, num_nonzero, noise_level } => {
                format!(
                    "synthetic samples_per_agent={samples_per_agent} dimension={dimension} \
                     num_nonzero={num_nonzero} noise_level={noise_level}"
                )
            }
            DataSpec::Libsvm { path, negative_labels, normalize } => {
                format!(
                    "libsvm path={} negative_labels={negative_labels:?} normalize={normalize}",
                    path.display()
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Logistic,
    Quadratic,
}

/// Loss family and its ridge coefficient, common to all agents.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKind,
    pub lambda: f64,
}

impl CostSpec {
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            CostKind::Logistic => "logistic",
            CostKind::Quadratic => "quadratic",
        };
        format!("{kind} lambda={}", self.lambda)
    }
}

/// Regularizer choice, mirroring [`Regularizer`] with JSON-friendly names.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegSpec {
    Zero,
    L1 { rho: f64 },
    ElasticNet { rho1: f64, rho2: f64 },
    Nonneg,
}

impl RegSpec {
    pub fn to_regularizer(self) -> Regularizer {
        match self {
            RegSpec::Zero => Regularizer::Zero,
            RegSpec::L1 { rho } => Regularizer::L1 { rho },
            RegSpec::ElasticNet { rho1, rho2 } => Regularizer::ElasticNet { rho1, rho2 },
            RegSpec::Nonneg => Regularizer::NonnegIndicator,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            RegSpec::Zero => "zero".into(),
            RegSpec::L1 { rho } => format!("l1 rho={rho}"),
            RegSpec::ElasticNet { rho1, rho2 } => format!("elastic_net rho1={rho1} rho2={rho2}"),
            RegSpec::Nonneg => "nonneg".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormSpec {
    Agent,
    Stacked,
    Reference,
    Extra,
}

impl FormSpec {
    pub fn to_solver_form(self) -> SolverForm {
        match self {
            FormSpec::Agent => SolverForm::Agent,
            FormSpec::Stacked => SolverForm::Stacked,
            FormSpec::Reference => SolverForm::Reference,
            FormSpec::Extra => SolverForm::Extra,
        }
    }
}

/// Step-size selection: derive certified steps from the problem constants,
/// or take explicit values (which may leave the certified region; the
/// harness warns and runs anyway).
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepsSpec {
    Certified {
        #[serde(default = "default_safety")]
        safety: f64,
    },
    Manual {
        mu: f64,
        alpha: f64,
    },
}

impl RunConfig {
    /// Seed for one of the named substreams.
    pub fn substream(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }

    /// Range checks beyond the schema. Returns the first violation, naming
    /// the field.
    pub fn validate(&self) -> Result<(), String> {
        let k = self.graph.num_agents();
        if k < 2 {
            return Err(format!("graph.K = {k} must be at least 2"));
        }
        if let GraphSpec::Random { p, .. } = self.graph {
            if !(p.is_finite() && p > 0.0 && p <= 1.0) {
                return Err(format!("graph.p = {p} must be in (0, 1]"));
            }
        }
        match &self.data {
            DataSpec::Synthetic { samples_per_agent, dimension, num_nonzero, noise_level } => {
                if *samples_per_agent == 0 {
                    return Err("data.samples_per_agent must be at least 1".into());
                }
                if *dimension == 0 {
                    return Err("data.dimension must be at least 1".into());
                }
                if *num_nonzero == 0 || num_nonzero > dimension {
                    return Err(format!(
                        "data.num_nonzero = {num_nonzero} must be in 1..={dimension}"
                    ));
                }
                if !(noise_level.is_finite() && *noise_level >= 0.0) {
                    return Err(format!("data.noise_level = {noise_level} must be >= 0"));
                }
                if self.cost.kind == CostKind::Logistic && *noise_level >= 1.0 {
                    return Err(format!(
                        "data.noise_level = {noise_level} must be < 1 for logistic labels \
                         (it is a flip probability)"
                    ));
                }
            }
            DataSpec::Libsvm { negative_labels, .. } => {
                if self.cost.kind == CostKind::Quadratic {
                    return Err("cost.kind = quadratic requires synthetic data".into());
                }
                if let Some(bad) = negative_labels.iter().find(|v| !v.is_finite()) {
                    return Err(format!("data.negative_labels contains non-finite value {bad}"));
                }
            }
        }
        if !(self.cost.lambda.is_finite() && self.cost.lambda >= 0.0) {
            return Err(format!("cost.lambda = {} must be >= 0", self.cost.lambda));
        }
        if let Err(err) = self.regularizer.to_regularizer().validate() {
            return Err(format!("regularizer: {err}"));
        }
        match self.steps {
            StepsSpec::Certified { safety } => {
                if !(safety.is_finite() && safety > 0.0 && safety < 1.0) {
                    return Err(format!("steps.safety = {safety} must be in (0, 1)"));
                }
            }
            StepsSpec::Manual { mu, alpha } => {
                if !(mu.is_finite() && mu > 0.0) {
                    return Err(format!("steps.mu = {mu} must be > 0"));
                }
                if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
                    return Err(format!("steps.alpha = {alpha} must be in (0, 1]"));
                }
            }
        }
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(format!("tol = {} must be >= 0", self.tol));
        }
        if self.form == FormSpec::Extra {
            if self.regularizer != RegSpec::Zero {
                return Err("form = extra requires regularizer.type = zero".into());
            }
            if let StepsSpec::Manual { alpha, .. } = self.steps {
                if alpha != 1.0 {
                    return Err(format!("form = extra requires steps.alpha = 1, got {alpha}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "graph": { "type": "ring", "K": 5 },
            "data": {
                "type": "synthetic",
                "samples_per_agent": 20,
                "dimension": 8,
                "num_nonzero": 3,
                "noise_level": 0.0
            },
            "cost": { "kind": "logistic", "lambda": 0.1 },
            "regularizer": { "type": "l1", "rho": 0.01 },
            "form": "agent",
            "steps": { "mode": "certified", "safety": 0.5 },
            "max_iters": 50,
            "tol": 0.0,
            "output": "trace.csv"
        })
    }

    fn parse(value: serde_json::Value) -> Result<RunConfig, String> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn base_config_parses() {
        let cfg = parse(base_json()).unwrap();
        assert_eq!(cfg.graph.num_agents(), 5);
        assert_eq!(cfg.regularizer.to_regularizer(), Regularizer::L1 { rho: 0.01 });
        assert_eq!(cfg.form.to_solver_form(), SolverForm::Agent);
        assert_ne!(cfg.substream("graph"), cfg.substream("data"));
    }

    #[test]
    fn defaults_fill_in() {
        let mut v = base_json();
        v["steps"] = serde_json::json!({ "mode": "certified" });
        v.as_object_mut().unwrap().remove("tol");
        v.as_object_mut().unwrap().remove("output");
        let cfg = parse(v).unwrap();
        assert_eq!(cfg.steps, StepsSpec::Certified { safety: 0.5 });
        assert_eq!(cfg.tol, 0.0);
        assert!(cfg.output.is_none());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = base_json();
        v["stepsize"] = serde_json::json!(0.1);
        let err = parse(v).unwrap_err();
        assert!(err.contains("stepsize"), "{err}");
    }

    #[test]
    fn range_violations_name_the_field() {
        let cases = [
            (serde_json::json!({ "mode": "manual", "mu": 0.1, "alpha": 1.5 }), "steps.alpha"),
            (serde_json::json!({ "mode": "manual", "mu": -0.1, "alpha": 0.5 }), "steps.mu"),
            (serde_json::json!({ "mode": "certified", "safety": 1.0 }), "steps.safety"),
        ];
        for (steps, field) in cases {
            let mut v = base_json();
            v["steps"] = steps;
            let err = parse(v).unwrap_err();
            assert!(err.contains(field), "expected '{field}' in '{err}'");
        }

        let mut v = base_json();
        v["graph"] = serde_json::json!({ "type": "random", "K": 5, "p": 0.0 });
        assert!(parse(v).unwrap_err().contains("graph.p"));

        let mut v = base_json();
        v["data"]["num_nonzero"] = serde_json::json!(50);
        assert!(parse(v).unwrap_err().contains("data.num_nonzero"));

        let mut v = base_json();
        v["max_iters"] = serde_json::json!(0);
        assert!(parse(v).unwrap_err().contains("max_iters"));
    }

    #[test]
    fn quadratic_needs_synthetic_data() {
        let mut v = base_json();
        v["cost"] = serde_json::json!({ "kind": "quadratic", "lambda": 0.1 });
        v["data"] = serde_json::json!({ "type": "libsvm", "path": "a.txt" });
        assert!(parse(v).unwrap_err().contains("quadratic requires synthetic"));
    }

    #[test]
    fn extra_constraints() {
        let mut v = base_json();
        v["form"] = serde_json::json!("extra");
        assert!(parse(v.clone()).unwrap_err().contains("regularizer"));

        v["regularizer"] = serde_json::json!({ "type": "zero" });
        parse(v.clone()).unwrap();

        v["steps"] = serde_json::json!({ "mode": "manual", "mu": 0.1, "alpha": 0.5 });
        assert!(parse(v).unwrap_err().contains("steps.alpha = 1"));
    }
}
