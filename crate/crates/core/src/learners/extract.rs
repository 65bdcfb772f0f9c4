//! Policy extraction and dataset diagnostics.

use crate::datasets::{OfflineDataset, Transition};
use crate::mdp::{argmax, Policy};

use super::losses::softmax_policy_row;
use super::{Algo, LearnerConfig, LearnerState};

/// Log of the extraction weight of each transition; `-inf` marks weight 0.
pub(crate) fn log_weights(state: &LearnerState, config: &LearnerConfig, transitions: &[Transition]) -> Vec<f64> {
    let alpha = config.alpha;
    transitions
        .iter()
        .map(|t| {
            let q = state.q_target(t.s, t.a);
            let adv = q - state.value(t.s);
            match config.algo {
                Algo::Sql if config.sql_drop_one_plus => adv.max(0.0).ln(),
                Algo::Sql => (1.0 + adv / (2.0 * alpha)).max(0.0).ln(),
                Algo::SqlU => {
                    let u = state.normalizer(t.s).unwrap_or(0.0);
                    (0.5 + (q - u) / (2.0 * alpha)).max(0.0).ln()
                }
                Algo::Eql => config.eql_residual_scale * adv / alpha,
                Algo::Iql => config.beta_awr * adv,
                Algo::Cql | Algo::OosQ => 0.0,
            }
        })
        .collect()
}

/// Extraction weight per transition, rescaled by the batch maximum so the
/// exponential weights cannot overflow. Rescaling leaves the extracted
/// policy unchanged.
pub fn extraction_weights(state: &LearnerState, config: &LearnerConfig, transitions: &[Transition]) -> Vec<f64> {
    let lw = log_weights(state, config, transitions);
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return vec![0.0; lw.len()];
    }
    lw.into_iter().map(|l| (l - m).exp()).collect()
}

/// Extracted policy.
///
/// Out-of-sample baselines act greedily on `Q` everywhere. Linear learners
/// use their softmax policy. Tabular learners use the closed form
/// `pi(a|s) ∝ sum of weights of dataset hits of (s, a)`; visited states whose
/// weights are all zero fall back to the empirical behavior, unvisited
/// states to uniform.
pub fn extract_policy(state: &LearnerState, config: &LearnerConfig, dataset: &OfflineDataset) -> Policy {
    let (ns, na) = (state.n_states(), state.n_actions());
    if !config.algo.is_in_sample() {
        let actions: Vec<usize> = (0..ns)
            .map(|s| argmax(&(0..na).map(|a| state.q(s, a)).collect::<Vec<_>>()))
            .collect();
        return Policy::deterministic(na, &actions);
    }
    if !state.is_tabular() {
        let probs: Vec<f64> = (0..ns)
            .flat_map(|s| softmax_policy_row(&state.features, &state.pi_logits, s))
            .collect();
        return Policy::from_weights(ns, na, &probs);
    }
    let lw = log_weights(state, config, &dataset.transitions);
    let mut state_max = vec![f64::NEG_INFINITY; ns];
    for (t, &l) in dataset.transitions.iter().zip(&lw) {
        state_max[t.s] = state_max[t.s].max(l);
    }
    let mut counts = vec![0.0; ns * na];
    let mut weights = vec![0.0; ns * na];
    for (t, &l) in dataset.transitions.iter().zip(&lw) {
        counts[t.s * na + t.a] += 1.0;
        if state_max[t.s].is_finite() {
            weights[t.s * na + t.a] += (l - state_max[t.s]).exp();
        }
    }
    for s in (0..ns).filter(|&s| !state_max[s].is_finite()) {
        weights[s * na..(s + 1) * na].copy_from_slice(&counts[s * na..(s + 1) * na]);
    }
    Policy::from_weights(ns, na, &weights)
}

/// Fraction of dataset pairs with `1 + (Q - V)/(2 alpha) > 0`.
pub fn sparsity_ratio(state: &LearnerState, dataset: &OfflineDataset, alpha: f64) -> f64 {
    if dataset.is_empty() {
        return f64::NAN;
    }
    let active = dataset
        .transitions
        .iter()
        .filter(|t| 1.0 + (state.q_target(t.s, t.a) - state.value(t.s)) / (2.0 * alpha) > 0.0)
        .count();
    active as f64 / dataset.len() as f64
}

/// Mean squared one-step residual `r + gamma E_pi Q(s', .) - Q(s, a)` over
/// the dataset, using the online critic.
pub fn bellman_error(state: &LearnerState, dataset: &OfflineDataset, pi: &Policy) -> f64 {
    if dataset.is_empty() {
        return f64::NAN;
    }
    let na = state.n_actions();
    let total: f64 = dataset
        .transitions
        .iter()
        .map(|t| {
            let next = if t.done {
                0.0
            } else {
                (0..na).map(|a| pi.prob(t.s_next, a) * state.q(t.s_next, a)).sum::<f64>()
            };
            let d = t.r + state.gamma * next - state.q(t.s, t.a);
            d * d
        })
        .sum();
    total / dataset.len() as f64
}
