//! In-sample value learners (SQL, EQL, SQL-U, IQL) and out-of-sample
//! baselines (a conservative Q-learner and plain Q-learning).
//!
//! Each training step samples a batch, updates `V` against the target
//! critics, regresses `Q` onto `r + gamma V(s')`, soft-updates the targets and,
//! for linear parametrizations, takes a weighted behavior-cloning step on the
//! policy. Tabular policies are extracted in closed form at the end.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{dot, FeatureMap};

mod extract;
pub mod losses;
mod train;

pub use extract::{bellman_error, extract_policy, extraction_weights, sparsity_ratio};
pub use train::{cql_baseline_train, oos_q_train, sql_u_train, train, train_with_eval, Evaluator, SqlUTables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Sql,
    Eql,
    SqlU,
    Iql,
    Cql,
    OosQ,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Sql, Algo::Eql, Algo::SqlU, Algo::Iql, Algo::Cql, Algo::OosQ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Sql => "sql",
            Algo::Eql => "eql",
            Algo::SqlU => "sql_u",
            Algo::Iql => "iql",
            Algo::Cql => "cql",
            Algo::OosQ => "oos_q",
        }
    }

    /// True for the learners that only query `Q` at dataset actions.
    pub fn is_in_sample(self) -> bool {
        !matches!(self, Algo::Cql | Algo::OosQ)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Parametrization {
    Tabular,
    Linear(Arc<FeatureMap>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub algo: Algo,
    /// Regularization temperature for SQL, EQL and SQL-U.
    pub alpha: f64,
    /// Expectile for IQL.
    pub tau: f64,
    /// Advantage temperature for IQL's policy extraction.
    pub beta_awr: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    /// Weight of the online parameters in the target update.
    pub soft_update_lambda: f64,
    pub steps: usize,
    /// Samples per step, drawn with replacement; 0 uses the whole dataset.
    pub batch_size: usize,
    pub parametrization: Parametrization,
    pub double_q: bool,
    pub eql_clip: f64,
    /// Multiplier on the advantage in EQL's extraction weight.
    pub eql_residual_scale: f64,
    /// Use `1(A > 0) A` instead of `max(1 + A/(2 alpha), 0)` for SQL extraction.
    pub sql_drop_one_plus: bool,
    pub cql_weight: f64,
    pub seed: u64,
    /// Record metrics every this many steps; 0 records only the final step.
    pub checkpoint_every: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            algo: Algo::Sql,
            alpha: 1.0,
            tau: 0.7,
            beta_awr: 3.0,
            lr_v: 3e-2,
            lr_q: 3e-2,
            lr_pi: 3e-2,
            soft_update_lambda: 0.05,
            steps: 50_000,
            batch_size: 256,
            parametrization: Parametrization::Tabular,
            double_q: false,
            eql_clip: 5.0,
            eql_residual_scale: 10.0,
            sql_drop_one_plus: true,
            cql_weight: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl LearnerConfig {
    pub fn for_algo(algo: Algo) -> Self {
        let mut c = LearnerConfig {
            algo,
            ..Default::default()
        };
        if algo == Algo::Eql {
            c.alpha = 2.0;
        }
        c
    }

    /// Linear parametrization with the slower linear learning rates.
    pub fn linear(mut self, features: Arc<FeatureMap>) -> Self {
        self.parametrization = Parametrization::Linear(features);
        self.lr_v = 3e-3;
        self.lr_q = 3e-3;
        self.lr_pi = 3e-3;
        self
    }

    /// Exact-theory settings: no extraction tricks and a single critic.
    pub fn without_tricks(mut self) -> Self {
        self.eql_residual_scale = 1.0;
        self.sql_drop_one_plus = false;
        self.double_q = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let positive = [
            ("alpha", self.alpha),
            ("beta_awr", self.beta_awr),
            ("lr_v", self.lr_v),
            ("lr_q", self.lr_q),
            ("lr_pi", self.lr_pi),
            ("eql_clip", self.eql_clip),
            ("eql_residual_scale", self.eql_residual_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(&format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.soft_update_lambda > 0.0 && self.soft_update_lambda <= 1.0) {
            return bad("soft_update_lambda must lie in (0, 1]");
        }
        if !(self.cql_weight >= 0.0) {
            return bad("cql_weight must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    pub sparsity_ratio: f64,
    pub bellman_error: f64,
    pub eval_return: f64,
    pub eval_success: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "v_loss",
    "q_loss",
    "pi_loss",
    "sparsity_ratio",
    "bellman_error",
    "eval_return",
    "eval_success",
];

impl MetricsRow {
    pub fn record(&self) -> [String; 8] {
        [
            self.step.to_string(),
            self.v_loss.to_string(),
            self.q_loss.to_string(),
            self.pi_loss.to_string(),
            self.sparsity_ratio.to_string(),
            self.bellman_error.to_string(),
            self.eval_return.to_string(),
            self.eval_success.to_string(),
        ]
    }
}

/// Parameters of a trained (or training) learner. Tabular runs use one-hot
/// features, so every table is a weight vector over a [`FeatureMap`].
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub algo: Algo,
    pub features: Arc<FeatureMap>,
    pub gamma: f64,
    pub v: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q1_target: Vec<f64>,
    pub q2_target: Vec<f64>,
    /// Policy logit weights over the state-action features.
    pub pi_logits: Vec<f64>,
    /// Normalizer table, SQL-U only.
    pub u: Option<Vec<f64>>,
    pub double_q: bool,
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
}

impl LearnerState {
    pub fn is_tabular(&self) -> bool {
        self.features.is_one_hot()
    }

    pub fn n_states(&self) -> usize {
        self.features.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.features.n_actions()
    }

    pub fn value(&self, s: usize) -> f64 {
        dot(self.features.psi(s), &self.v)
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        dot(self.features.phi(s, a), &self.q1)
    }

    /// Target critic, the minimum of both when double-Q is on.
    pub fn q_target(&self, s: usize, a: usize) -> f64 {
        let q1 = dot(self.features.phi(s, a), &self.q1_target);
        if self.double_q {
            q1.min(dot(self.features.phi(s, a), &self.q2_target))
        } else {
            q1
        }
    }

    pub fn normalizer(&self, s: usize) -> Option<f64> {
        self.u.as_ref().map(|u| dot(self.features.psi(s), u))
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.value(s)).collect()
    }

    pub fn q_table(&self) -> Vec<f64> {
        (0..self.n_states())
            .flat_map(|s| (0..self.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| self.q(s, a))
            .collect()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let tables: [(&str, &[f64]); 6] = [
            ("V", &self.v),
            ("Q1", &self.q1),
            ("Q2", &self.q2),
            ("Q1 target", &self.q1_target),
            ("Q2 target", &self.q2_target),
            ("policy", &self.pi_logits),
        ];
        for (name, t) in tables {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: self.step,
                    what: format!("non-finite entry in {name}"),
                });
            }
        }
        if let Some(u) = &self.u {
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: self.step,
                    what: "non-finite entry in U".into(),
                });
            }
        }
        Ok(())
    }
}
