use std::borrow::Cow;
use std::sync::Arc;

use rand::Rng as _;

use crate::datasets::{OfflineDataset, Transition};
use crate::error::{Error, Result};
use crate::features::{dot, make_one_hot_features, FeatureMap};
use crate::mdp::{rollout, Policy, TabularMdp};
use crate::rng::{self, Rng};

use super::extract::{bellman_error, extract_policy, extraction_weights, sparsity_ratio};
use super::losses::{cql_loss, eql_v_loss, iql_v_loss, q_loss, sql_v_loss, weighted_bc};
use super::{Algo, LearnerConfig, LearnerState, MetricsRow, Parametrization};

const INIT_NOISE: f64 = 1e-2;

/// Rollout settings for the `eval_*` metrics columns.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub mdp: &'a TabularMdp,
    pub episodes: usize,
    pub cap: usize,
    pub seed: u64,
    /// Act greedily on the extracted policy (at visited states for tabular learners).
    pub greedy: bool,
}

impl Evaluator<'_> {
    pub fn policy(&self, state: &LearnerState, config: &LearnerConfig, dataset: &OfflineDataset) -> Policy {
        let pi = extract_policy(state, config, dataset);
        if !self.greedy {
            return pi;
        }
        let mask: Vec<bool> = if state.is_tabular() && config.algo.is_in_sample() {
            let mut m = vec![false; state.n_states()];
            dataset.transitions.iter().for_each(|t| m[t.s] = true);
            m
        } else {
            vec![true; state.n_states()]
        };
        pi.greedy_where(&mask)
    }
}

fn features_for(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<Arc<FeatureMap>> {
    match &config.parametrization {
        Parametrization::Tabular => Ok(Arc::new(make_one_hot_features(dataset.n_states, dataset.n_actions))),
        Parametrization::Linear(f) => {
            if f.n_states() != dataset.n_states || f.n_actions() != dataset.n_actions {
                return Err(Error::Config("feature map does not match the dataset shape".into()));
            }
            Ok(Arc::clone(f))
        }
    }
}

fn init_state(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<LearnerState> {
    config.validate()?;
    dataset.require_nonempty()?;
    let features = features_for(dataset, config)?;
    let dim = features.dim();
    let mut q1 = vec![0.0; dim];
    let mut q2 = vec![0.0; dim];
    if config.double_q {
        let mut r1 = rng::substream_indexed(config.seed, "init", 1);
        let mut r2 = rng::substream_indexed(config.seed, "init", 2);
        q1.iter_mut().for_each(|x| *x = r1.random_range(-INIT_NOISE..INIT_NOISE));
        q2.iter_mut().for_each(|x| *x = r2.random_range(-INIT_NOISE..INIT_NOISE));
    }
    Ok(LearnerState {
        algo: config.algo,
        gamma: dataset.gamma,
        v: vec![0.0; features.state_dim()],
        q1_target: q1.clone(),
        q2_target: q2.clone(),
        q1,
        q2,
        pi_logits: vec![0.0; dim],
        u: None,
        double_q: config.double_q,
        step: 0,
        metrics: Vec::new(),
        features,
    })
}

fn sample_batch<'d>(dataset: &'d OfflineDataset, size: usize, rng: &mut Rng) -> Cow<'d, [Transition]> {
    if size == 0 {
        return Cow::Borrowed(&dataset.transitions);
    }
    let n = dataset.len();
    Cow::Owned((0..size).map(|_| dataset.transitions[rng.random_range(0..n)]).collect())
}

fn descend(params: &mut [f64], grad: &[f64], lr: f64) {
    params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
}

fn soft_update(target: &mut [f64], online: &[f64], lambda: f64) {
    target
        .iter_mut()
        .zip(online)
        .for_each(|(t, o)| *t = lambda * o + (1.0 - lambda) * *t);
}

fn ensure_finite(step: usize, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: what.to_string(),
        })
    }
}

fn is_checkpoint(step: usize, config: &LearnerConfig) -> bool {
    step == config.steps || (config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every))
}

fn record_metrics(
    state: &mut LearnerState,
    config: &LearnerConfig,
    dataset: &OfflineDataset,
    eval: Option<&Evaluator<'_>>,
    losses: (f64, f64),
) -> Result<()> {
    state.check_finite()?;
    let pi = extract_policy(state, config, dataset);
    let pi_loss = if config.algo.is_in_sample() {
        let w = extraction_weights(state, config, &dataset.transitions);
        let nll: f64 = dataset
            .transitions
            .iter()
            .zip(&w)
            .map(|(t, w)| -w * pi.prob(t.s, t.a).max(f64::MIN_POSITIVE).ln())
            .sum();
        nll / dataset.len() as f64
    } else {
        f64::NAN
    };
    let sparsity = if matches!(config.algo, Algo::Sql | Algo::SqlU) {
        sparsity_ratio(state, dataset, config.alpha)
    } else {
        f64::NAN
    };
    let (eval_return, eval_success) = match eval {
        Some(e) => {
            let stats = rollout(e.mdp, &e.policy(state, config, dataset), e.episodes, e.cap, e.seed)?;
            (stats.mean_return, stats.success_rate)
        }
        None => (f64::NAN, f64::NAN),
    };
    state.metrics.push(MetricsRow {
        step: state.step,
        v_loss: losses.0,
        q_loss: losses.1,
        pi_loss,
        sparsity_ratio: sparsity,
        bellman_error: bellman_error(state, dataset, &pi),
        eval_return,
        eval_success,
    });
    Ok(())
}

/// Trains a learner; see [`train_with_eval`].
pub fn train(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<LearnerState> {
    train_with_eval(dataset, config, None)
}

/// Runs `config.steps` training steps and records metrics at each
/// checkpoint. Deterministic given `config.seed`.
pub fn train_with_eval(
    dataset: &OfflineDataset,
    config: &LearnerConfig,
    eval: Option<&Evaluator<'_>>,
) -> Result<LearnerState> {
    match config.algo {
        Algo::SqlU => sql_u_run(dataset, config, eval).map(|t| t.state),
        Algo::Cql | Algo::OosQ => out_of_sample_run(dataset, config, eval),
        Algo::Sql | Algo::Eql | Algo::Iql => in_sample_run(dataset, config, eval),
    }
}

fn in_sample_run(
    dataset: &OfflineDataset,
    config: &LearnerConfig,
    eval: Option<&Evaluator<'_>>,
) -> Result<LearnerState> {
    let mut st = init_state(dataset, config)?;
    let mut rng = rng::substream(config.seed, "batch");
    let fm = Arc::clone(&st.features);
    let tabular = st.is_tabular();
    for step in 1..=config.steps {
        st.step = step;
        let batch = sample_batch(dataset, config.batch_size, &mut rng);

        let q_t: Vec<f64> = batch.iter().map(|t| st.q_target(t.s, t.a)).collect();
        let (v_loss, g) = match config.algo {
            Algo::Sql => sql_v_loss(&batch, &fm, &st.v, &q_t, config.alpha),
            Algo::Eql => eql_v_loss(&batch, &fm, &st.v, &q_t, config.alpha, config.eql_clip),
            _ => iql_v_loss(&batch, &fm, &st.v, &q_t, config.tau),
        };
        descend(&mut st.v, &g, config.lr_v);

        let v_next: Vec<f64> = batch.iter().map(|t| dot(fm.psi(t.s_next), &st.v)).collect();
        let (q_l, g) = q_loss(&batch, &fm, &st.q1, &v_next, dataset.gamma);
        descend(&mut st.q1, &g, config.lr_q);
        if config.double_q {
            let (_, g) = q_loss(&batch, &fm, &st.q2, &v_next, dataset.gamma);
            descend(&mut st.q2, &g, config.lr_q);
        }
        soft_update(&mut st.q1_target, &st.q1, config.soft_update_lambda);
        if config.double_q {
            soft_update(&mut st.q2_target, &st.q2, config.soft_update_lambda);
        }

        if !tabular {
            let w = extraction_weights(&st, config, &batch);
            let (_, g) = weighted_bc(&batch, &fm, &st.pi_logits, &w);
            descend(&mut st.pi_logits, &g, config.lr_pi);
        }
        ensure_finite(step, "loss", &[v_loss, q_l])?;
        if is_checkpoint(step, config) {
            record_metrics(&mut st, config, dataset, eval, (v_loss, q_l))?;
        }
    }
    st.check_finite()?;
    Ok(st)
}

/// Baselines that back up `max_a Q_target(s', a)` over all actions, with an
/// optional conservative penalty.
fn out_of_sample_run(
    dataset: &OfflineDataset,
    config: &LearnerConfig,
    eval: Option<&Evaluator<'_>>,
) -> Result<LearnerState> {
    let mut st = init_state(dataset, config)?;
    let mut rng = rng::substream(config.seed, "batch");
    let fm = Arc::clone(&st.features);
    let weight = if config.algo == Algo::Cql { config.cql_weight } else { 0.0 };
    let na = dataset.n_actions;
    for step in 1..=config.steps {
        st.step = step;
        let batch = sample_batch(dataset, config.batch_size, &mut rng);
        let max_next: Vec<f64> = batch
            .iter()
            .map(|t| (0..na).map(|a| st.q_target(t.s_next, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (q_l, g) = cql_loss(&batch, &fm, &st.q1, &max_next, dataset.gamma, weight);
        descend(&mut st.q1, &g, config.lr_q);
        if config.double_q {
            let (_, g) = cql_loss(&batch, &fm, &st.q2, &max_next, dataset.gamma, weight);
            descend(&mut st.q2, &g, config.lr_q);
        }
        soft_update(&mut st.q1_target, &st.q1, config.soft_update_lambda);
        if config.double_q {
            soft_update(&mut st.q2_target, &st.q2, config.soft_update_lambda);
        }
        ensure_finite(step, "loss", &[q_l])?;
        if is_checkpoint(step, config) {
            record_metrics(&mut st, config, dataset, eval, (f64::NAN, q_l))?;
        }
    }
    st.check_finite()?;
    Ok(st)
}

/// Conservative Q-learning baseline.
pub fn cql_baseline_train(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<LearnerState> {
    let config = LearnerConfig {
        algo: Algo::Cql,
        ..config.clone()
    };
    out_of_sample_run(dataset, &config, None)
}

/// Plain Q-learning with the max backup over all actions.
pub fn oos_q_train(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<LearnerState> {
    let config = LearnerConfig {
        algo: Algo::OosQ,
        ..config.clone()
    };
    out_of_sample_run(dataset, &config, None)
}

/// The three tables learned by SQL-U, plus the full learner state.
#[derive(Debug, Clone)]
pub struct SqlUTables {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `[s][a]`
    pub q: Vec<f64>,
    pub state: LearnerState,
}

/// SQL-U: learns the normalizer `U` from its convex objective, `V` by
/// regressing onto `U + alpha (pi/mu)^2` and `Q` from the Bellman loss.
/// Tabular only.
pub fn sql_u_train(dataset: &OfflineDataset, config: &LearnerConfig) -> Result<SqlUTables> {
    let config = LearnerConfig {
        algo: Algo::SqlU,
        ..config.clone()
    };
    sql_u_run(dataset, &config, None)
}

fn sql_u_run(dataset: &OfflineDataset, config: &LearnerConfig, eval: Option<&Evaluator<'_>>) -> Result<SqlUTables> {
    if config.parametrization != Parametrization::Tabular {
        return Err(Error::Config("SQL-U supports the tabular parametrization only".into()));
    }
    let mut st = init_state(dataset, config)?;
    let mut u = vec![0.0; st.features.state_dim()];
    let mut rng = rng::substream(config.seed, "batch");
    let fm = Arc::clone(&st.features);
    let alpha = config.alpha;
    for step in 1..=config.steps {
        st.step = step;
        let batch = sample_batch(dataset, config.batch_size, &mut rng);
        let n = batch.len() as f64;

        // U: E[1(z > 0) z^2 + U/alpha], z = 1/2 + (Q - U)/(2 alpha)
        let mut gu = vec![0.0; u.len()];
        let mut ratios = Vec::with_capacity(batch.len());
        let mut u_loss = 0.0;
        for t in batch.iter() {
            let us = dot(fm.psi(t.s), &u);
            let z = (0.5 + (st.q_target(t.s, t.a) - us) / (2.0 * alpha)).max(0.0);
            u_loss += z * z + us / alpha;
            crate::features::axpy(&mut gu, fm.psi(t.s), (1.0 - z) / (alpha * n));
            ratios.push(z);
        }
        descend(&mut u, &gu, config.lr_v);

        // V: regression onto U + alpha x^2
        let mut gv = vec![0.0; st.v.len()];
        for (t, x) in batch.iter().zip(&ratios) {
            let target = dot(fm.psi(t.s), &u) + alpha * x * x;
            let d = target - dot(fm.psi(t.s), &st.v);
            crate::features::axpy(&mut gv, fm.psi(t.s), -2.0 * d / n);
        }
        descend(&mut st.v, &gv, config.lr_v);

        let v_next: Vec<f64> = batch.iter().map(|t| dot(fm.psi(t.s_next), &st.v)).collect();
        let (q_l, g) = q_loss(&batch, &fm, &st.q1, &v_next, dataset.gamma);
        descend(&mut st.q1, &g, config.lr_q);
        if config.double_q {
            let (_, g) = q_loss(&batch, &fm, &st.q2, &v_next, dataset.gamma);
            descend(&mut st.q2, &g, config.lr_q);
        }
        soft_update(&mut st.q1_target, &st.q1, config.soft_update_lambda);
        if config.double_q {
            soft_update(&mut st.q2_target, &st.q2, config.soft_update_lambda);
        }
        ensure_finite(step, "loss", &[u_loss, q_l])?;
        if is_checkpoint(step, config) {
            st.u = Some(u.clone());
            record_metrics(&mut st, config, dataset, eval, (u_loss / n, q_l))?;
        }
    }
    st.u = Some(u.clone());
    st.check_finite()?;
    Ok(SqlUTables {
        v: st.values(),
        q: st.q_table(),
        u,
        state: st,
    })
}
