//! Batch losses and their analytic gradients.
//!
//! Every loss is a mean over the batch. Target quantities (`Q` targets for the
//! value losses, next-state values for the Q loss, extraction weights for
//! behavior cloning) are passed per sample and treated as constants.

use crate::datasets::Transition;
use crate::features::{axpy, dot, FeatureMap};

fn check_len(batch: &[Transition], per_sample: &[f64]) {
    assert_eq!(batch.len(), per_sample.len(), "one target per batch sample");
}

/// `d/dresidual` of the residual-dependent part of the SQL value loss,
/// `1(z > 0) z^2` with `z = 1 + residual / (2 alpha)`.
pub fn sql_residual_grad(residual: f64, alpha: f64) -> f64 {
    (1.0 + residual / (2.0 * alpha)).max(0.0) / alpha
}

/// Same for the expectile loss `|tau - 1(residual < 0)| residual^2`.
pub fn iql_residual_grad(residual: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(residual, tau) * residual
}

/// Same for the exponential loss with the exponent clipped at `clip`.
pub fn eql_residual_grad(residual: f64, alpha: f64, clip: f64) -> f64 {
    (residual / alpha).min(clip).exp() / alpha
}

pub fn expectile_weight(residual: f64, tau: f64) -> f64 {
    if residual < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Per-sample SQL value loss and its derivative in `v`.
pub fn sql_v_point(q: f64, v: f64, alpha: f64) -> (f64, f64) {
    let z = 1.0 + (q - v) / (2.0 * alpha);
    let active = z.max(0.0);
    (active * active + v / alpha, (1.0 - active) / alpha)
}

/// Per-sample exponential value loss and its derivative in `v`. Past the
/// clip the exponential continues linearly, so the weight `exp(min(z, clip))`
/// is the exact derivative.
pub fn eql_v_point(q: f64, v: f64, alpha: f64, clip: f64) -> (f64, f64) {
    let z = (q - v) / alpha;
    let loss = if z <= clip {
        z.exp()
    } else {
        clip.exp() * (1.0 + z - clip)
    };
    (loss + v / alpha, (1.0 - z.min(clip).exp()) / alpha)
}

/// Per-sample expectile loss and its derivative in `v`.
pub fn iql_v_point(q: f64, v: f64, tau: f64) -> (f64, f64) {
    let d = q - v;
    let w = expectile_weight(d, tau);
    (w * d * d, -2.0 * w * d)
}

fn value_loss(
    batch: &[Transition],
    fm: &FeatureMap,
    v: &[f64],
    q_target: &[f64],
    point: impl Fn(f64, f64) -> (f64, f64),
) -> (f64, Vec<f64>) {
    check_len(batch, q_target);
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; v.len()];
    let mut loss = 0.0;
    for (t, &q) in batch.iter().zip(q_target) {
        let row = fm.psi(t.s);
        let (l, d) = point(q, dot(row, v));
        loss += l;
        axpy(&mut grad, row, d / n);
    }
    (loss / n, grad)
}

/// `E[1(z > 0) z^2 + V/alpha]`, `z = 1 + (Q - V)/(2 alpha)`.
pub fn sql_v_loss(batch: &[Transition], fm: &FeatureMap, v: &[f64], q_target: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    value_loss(batch, fm, v, q_target, |q, v| sql_v_point(q, v, alpha))
}

/// `E[exp((Q - V)/alpha) + V/alpha]` with the exponent clipped at `clip`.
pub fn eql_v_loss(
    batch: &[Transition],
    fm: &FeatureMap,
    v: &[f64],
    q_target: &[f64],
    alpha: f64,
    clip: f64,
) -> (f64, Vec<f64>) {
    value_loss(batch, fm, v, q_target, |q, v| eql_v_point(q, v, alpha, clip))
}

/// `E[|tau - 1(Q - V < 0)| (Q - V)^2]`.
pub fn iql_v_loss(batch: &[Transition], fm: &FeatureMap, v: &[f64], q_target: &[f64], tau: f64) -> (f64, Vec<f64>) {
    value_loss(batch, fm, v, q_target, |q, v| iql_v_point(q, v, tau))
}

/// `E[(r + gamma (1 - done) V(s') - Q(s, a))^2]` with `v_next[i] = V(s'_i)`.
pub fn q_loss(batch: &[Transition], fm: &FeatureMap, q: &[f64], v_next: &[f64], gamma: f64) -> (f64, Vec<f64>) {
    check_len(batch, v_next);
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; q.len()];
    let mut loss = 0.0;
    for (t, &vn) in batch.iter().zip(v_next) {
        let row = fm.phi(t.s, t.a);
        let target = t.r + if t.done { 0.0 } else { gamma * vn };
        let delta = target - dot(row, q);
        loss += delta * delta;
        axpy(&mut grad, row, -2.0 * delta / n);
    }
    (loss / n, grad)
}

fn softmax_row(fm: &FeatureMap, w: &[f64], s: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..fm.n_actions()).map(|a| dot(fm.phi(s, a), w)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn logsumexp_row(fm: &FeatureMap, w: &[f64], s: usize) -> f64 {
    let logits: Vec<f64> = (0..fm.n_actions()).map(|a| dot(fm.phi(s, a), w)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// `E[logsumexp_a Q(s, a) - Q(s, a_data)]`.
pub fn cql_penalty(batch: &[Transition], fm: &FeatureMap, q: &[f64]) -> (f64, Vec<f64>) {
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; q.len()];
    let mut loss = 0.0;
    for t in batch {
        loss += logsumexp_row(fm, q, t.s) - dot(fm.phi(t.s, t.a), q);
        for (a, p) in softmax_row(fm, q, t.s).into_iter().enumerate() {
            axpy(&mut grad, fm.phi(t.s, a), p / n);
        }
        axpy(&mut grad, fm.phi(t.s, t.a), -1.0 / n);
    }
    (loss / n, grad)
}

/// Squared Bellman loss with a max backup over all actions of the target
/// network (`max_next[i] = max_a Q_target(s'_i, a)`) plus the conservative
/// penalty scaled by `weight`.
pub fn cql_loss(
    batch: &[Transition],
    fm: &FeatureMap,
    q: &[f64],
    max_next: &[f64],
    gamma: f64,
    weight: f64,
) -> (f64, Vec<f64>) {
    let (bl, mut grad) = q_loss(batch, fm, q, max_next, gamma);
    if weight == 0.0 {
        return (bl, grad);
    }
    let (pl, pg) = cql_penalty(batch, fm, q);
    for (g, p) in grad.iter_mut().zip(pg) {
        *g += weight * p;
    }
    (bl + weight * pl, grad)
}

/// `-E[w log pi_theta(a | s)]` for the softmax policy over `theta . phi(s, a)`.
pub fn weighted_bc(batch: &[Transition], fm: &FeatureMap, theta: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    check_len(batch, weights);
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for (t, &w) in batch.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        loss -= w * (dot(fm.phi(t.s, t.a), theta) - logsumexp_row(fm, theta, t.s));
        axpy(&mut grad, fm.phi(t.s, t.a), -w / n);
        for (a, p) in softmax_row(fm, theta, t.s).into_iter().enumerate() {
            axpy(&mut grad, fm.phi(t.s, a), w * p / n);
        }
    }
    (loss / n, grad)
}

pub(crate) fn softmax_policy_row(fm: &FeatureMap, theta: &[f64], s: usize) -> Vec<f64> {
    softmax_row(fm, theta, s)
}
