//! Exact solver for behavior-regularized tabular MDPs.
//!
//! At each state the optimal policy is
//! `pi(a) = mu(a) * max(g_f((Q(a) - U) / alpha), 0)`, where the normalizer `U`
//! makes the row sum to one, and the state value is
//! `V = U + alpha * E_mu[(pi/mu)^2 f'(pi/mu)]`. Iterating
//! `Q = r + gamma E[V(s')]` through these conditions is a gamma-contraction;
//! [`solve_fixed_point`] runs it to a tolerance from `V = 0`.

use std::io::Write;

use crate::datasets::EmpiricalModel;
use crate::error::{Error, Result};
use crate::mdp::{sup_diff, Policy, TabularMdp};
use crate::par::{self, Exec};
use crate::regularizers::Regularizer;

const NORMALIZER_TOL: f64 = 1e-10;
const NORMALIZER_MAX_ITER: usize = 400;
const SUPPORT_TOL: f64 = 1e-12;

/// Model the regularized backup runs on: dynamics, rewards and a behavior
/// policy, restricted to `included` states. Excluded and terminal states
/// have value 0.
#[derive(Debug, Clone)]
pub struct RegularizedModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `[s][a][s']`
    pub transition: Vec<f64>,
    /// `[s][a]`
    pub reward: Vec<f64>,
    /// `[s][a]`, a distribution at every included state.
    pub mu: Vec<f64>,
    /// `[s][a]`, whether `(s, a)` has dynamics; `Q` is NaN elsewhere.
    pub has_model: Vec<bool>,
    pub included: Vec<bool>,
    pub terminal: Vec<bool>,
    pub initial_dist: Vec<f64>,
}

impl RegularizedModel {
    /// True MDP with a known behavior policy; every non-terminal state is included.
    pub fn from_mdp(mdp: &TabularMdp, mu: &Policy) -> Result<Self> {
        if mu.n_states() != mdp.n_states() || mu.n_actions() != mdp.n_actions() {
            return Err(Error::InvalidArgument("behavior policy shape does not match MDP".into()));
        }
        let terminal = mdp.terminal().to_vec();
        Ok(RegularizedModel {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            gamma: mdp.gamma(),
            transition: mdp.transitions().to_vec(),
            reward: mdp.rewards().to_vec(),
            mu: mu.probs().to_vec(),
            has_model: vec![true; mdp.n_states() * mdp.n_actions()],
            included: terminal.iter().map(|t| !t).collect(),
            terminal,
            initial_dist: mdp.initial_dist().to_vec(),
        })
    }

    /// Empirical model restricted to visited, non-terminal states. The start
    /// distribution is uniform over included states.
    pub fn from_empirical(em: &EmpiricalModel) -> Self {
        let included: Vec<bool> = (0..em.n_states)
            .map(|s| em.visited(s) && !em.terminal[s])
            .collect();
        let n_inc = included.iter().filter(|&&b| b).count().max(1);
        RegularizedModel {
            n_states: em.n_states,
            n_actions: em.n_actions,
            gamma: em.gamma,
            transition: em.t_hat.clone(),
            reward: em.r_hat.clone(),
            mu: em.mu_hat.clone(),
            has_model: em.support.clone(),
            initial_dist: included
                .iter()
                .map(|&b| if b { 1.0 / n_inc as f64 } else { 0.0 })
                .collect(),
            included,
            terminal: em.terminal.clone(),
        }
    }

    pub fn mu_row(&self, s: usize) -> &[f64] {
        &self.mu[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// States whose value is held at 0 without being terminal.
    pub fn excluded_states(&self) -> Vec<usize> {
        (0..self.n_states)
            .filter(|&s| !self.included[s] && !self.terminal[s])
            .collect()
    }

    /// `Q(s, .)` under `v`; NaN where the model has no dynamics.
    pub fn q_row(&self, s: usize, v: &[f64]) -> Vec<f64> {
        (0..self.n_actions)
            .map(|a| {
                if !self.has_model[s * self.n_actions + a] {
                    return f64::NAN;
                }
                let ev: f64 = self
                    .next_dist(s, a)
                    .iter()
                    .zip(v)
                    .map(|(p, v)| p * v)
                    .sum();
                self.reward[s * self.n_actions + a] + self.gamma * ev
            })
            .collect()
    }
}

fn normalization_lhs(q: &[f64], mu: &[f64], alpha: f64, reg: &Regularizer, u: f64) -> f64 {
    q.iter()
        .zip(mu)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&q, &m)| m * reg.g_f((q - u) / alpha).max(0.0))
        .sum()
}

/// Solves `sum_a mu(a) max(g_f((q(a) - U) / alpha), 0) = 1` for `U` by
/// bisection. Actions with `mu(a) = 0` are ignored.
pub fn solve_normalizer(q_row: &[f64], mu_row: &[f64], alpha: f64, reg: &Regularizer) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if q_row.len() != mu_row.len() {
        return Err(Error::InvalidArgument("q and mu rows differ in length".into()));
    }
    let active: Vec<usize> = (0..mu_row.len()).filter(|&a| mu_row[a] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("behavior row has no support".into()));
    }
    if active.iter().any(|&a| !q_row[a].is_finite()) {
        return Err(Error::InvalidArgument("non-finite Q on the behavior support".into()));
    }
    let qmin = active.iter().map(|&a| q_row[a]).fold(f64::INFINITY, f64::min);
    let qmax = active.iter().map(|&a| q_row[a]).fold(f64::NEG_INFINITY, f64::max);
    let lhs = |u: f64| normalization_lhs(q_row, mu_row, alpha, reg, u);

    let mut c = 1.0;
    let (mut lo, mut hi);
    loop {
        lo = qmin - alpha * c;
        hi = qmax + alpha * c;
        if lhs(lo) >= 1.0 && lhs(hi) <= 1.0 {
            break;
        }
        c *= 2.0;
        if c > 1e30 {
            return Err(Error::NonConvergence {
                iterations: 0,
                residual: f64::NAN,
            });
        }
    }
    for _ in 0..NORMALIZER_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let val = lhs(mid);
        if val == 1.0 {
            return Ok(mid);
        }
        if val > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rlo, rhi) = ((lhs(lo) - 1.0).abs(), (lhs(hi) - 1.0).abs());
    let (u, residual) = if rlo <= rhi { (lo, rlo) } else { (hi, rhi) };
    let collapsed = 0.5 * (lo + hi) <= lo || 0.5 * (lo + hi) >= hi;
    if residual <= NORMALIZER_TOL || collapsed {
        Ok(u)
    } else {
        Err(Error::NonConvergence {
            iterations: NORMALIZER_MAX_ITER,
            residual,
        })
    }
}

/// `pi(a) = mu(a) max(g_f((q(a) - U) / alpha), 0)`, renormalized to absorb
/// the bisection tolerance.
pub fn optimal_policy_row(q_row: &[f64], mu_row: &[f64], alpha: f64, reg: &Regularizer, u: f64) -> Vec<f64> {
    let mut pi: Vec<f64> = q_row
        .iter()
        .zip(mu_row)
        .map(|(&q, &m)| if m > 0.0 { m * reg.g_f((q - u) / alpha).max(0.0) } else { 0.0 })
        .collect();
    let sum: f64 = pi.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        pi.iter_mut().for_each(|p| *p /= sum);
    }
    pi
}

/// `V = U + alpha * sum_a mu(a) x^2 f'(x)` with `x = pi(a) / mu(a)`; exactly
/// `U + alpha` for reverse KL.
pub fn regularized_state_value(
    q_row: &[f64],
    mu_row: &[f64],
    pi_row: &[f64],
    alpha: f64,
    reg: &Regularizer,
    u: f64,
) -> f64 {
    debug_assert_eq!(q_row.len(), mu_row.len());
    if reg.is_reverse_kl() {
        return u + alpha;
    }
    let extra: f64 = mu_row
        .iter()
        .zip(pi_row)
        .filter(|(&m, &p)| m > 0.0 && p > 0.0)
        .map(|(&m, &p)| {
            let x = p / m;
            m * x * x * reg.f_prime(x)
        })
        .sum();
    u + alpha * extra
}

/// Normalizer, policy row and value for one state.
fn solve_state(
    model: &RegularizedModel,
    s: usize,
    v: &[f64],
    alpha: f64,
    reg: &Regularizer,
) -> Result<(Vec<f64>, f64, Vec<f64>, f64)> {
    let q = model.q_row(s, v);
    let mu = model.mu_row(s);
    let u = solve_normalizer(&q, mu, alpha, reg).map_err(|e| Error::at_state(s, e))?;
    let pi = optimal_policy_row(&q, mu, alpha, reg, u);
    let value = regularized_state_value(&q, mu, &pi, alpha, reg, u);
    Ok((q, u, pi, value))
}

/// One application of the regularized optimality operator.
pub fn regularized_backup(model: &RegularizedModel, v: &[f64], alpha: f64, reg: &Regularizer) -> Result<Vec<f64>> {
    regularized_backup_with(model, v, alpha, reg, Exec::default())
}

pub fn regularized_backup_with(
    model: &RegularizedModel,
    v: &[f64],
    alpha: f64,
    reg: &Regularizer,
    exec: Exec,
) -> Result<Vec<f64>> {
    if v.len() != model.n_states {
        return Err(Error::InvalidArgument("value vector has wrong length".into()));
    }
    par::map_indices(model.n_states, exec, |s| {
        if !model.included[s] {
            return Ok(0.0);
        }
        solve_state(model, s, v, alpha, reg).map(|r| r.3)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct SolutionTables {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `[s][a]`; NaN where the model has no dynamics.
    pub q: Vec<f64>,
    pub pi: Policy,
    pub alpha: f64,
    pub regularizer: String,
    pub included: Vec<bool>,
    pub iterations: usize,
    pub residual_trace: Vec<f64>,
}

impl SolutionTables {
    pub fn n_actions(&self) -> usize {
        self.pi.n_actions()
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        let na = self.n_actions();
        &self.q[s * na..(s + 1) * na]
    }

    /// CSV with columns `state,included,U,V`.
    pub fn write_states_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "included", "U", "V"])?;
        for s in 0..self.u.len() {
            out.write_record([
                s.to_string(),
                u8::from(self.included[s]).to_string(),
                self.u[s].to_string(),
                self.v[s].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// CSV with columns `state,action,Q,pi`.
    pub fn write_actions_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "action", "Q", "pi"])?;
        let na = self.n_actions();
        for s in 0..self.u.len() {
            for a in 0..na {
                out.write_record([
                    s.to_string(),
                    a.to_string(),
                    self.q[s * na + a].to_string(),
                    self.pi.prob(s, a).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Q, U, pi and V implied by a value vector. Rows of non-included states
/// fall back to the behavior row (uniform where it is empty).
pub fn tables_from_values(
    model: &RegularizedModel,
    v: &[f64],
    alpha: f64,
    reg: &Regularizer,
    exec: Exec,
) -> Result<SolutionTables> {
    let (ns, na) = (model.n_states, model.n_actions);
    let rows = par::map_indices(ns, exec, |s| {
        if !model.included[s] {
            let q = if model.terminal[s] { vec![0.0; na] } else { model.q_row(s, v) };
            return Ok((q, 0.0, model.mu_row(s).to_vec(), 0.0));
        }
        solve_state(model, s, v, alpha, reg)
    });
    let mut u = vec![0.0; ns];
    let mut vout = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut pi = vec![0.0; ns * na];
    for (s, row) in rows.into_iter().enumerate() {
        let (qr, us, pr, vs) = row?;
        u[s] = us;
        vout[s] = vs;
        q[s * na..(s + 1) * na].copy_from_slice(&qr);
        pi[s * na..(s + 1) * na].copy_from_slice(&pr);
    }
    Ok(SolutionTables {
        u,
        v: vout,
        q,
        pi: Policy::from_weights(ns, na, &pi),
        alpha,
        regularizer: reg.name().to_string(),
        included: model.included.clone(),
        iterations: 0,
        residual_trace: Vec::new(),
    })
}

/// Iterates the regularized backup from `V = 0` until the sup-norm change
/// is at most `tol`.
pub fn solve_fixed_point(
    model: &RegularizedModel,
    alpha: f64,
    reg: &Regularizer,
    tol: f64,
    max_iter: usize,
) -> Result<SolutionTables> {
    solve_fixed_point_with(model, alpha, reg, tol, max_iter, Exec::default())
}

pub fn solve_fixed_point_with(
    model: &RegularizedModel,
    alpha: f64,
    reg: &Regularizer,
    tol: f64,
    max_iter: usize,
    exec: Exec,
) -> Result<SolutionTables> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut v = vec![0.0; model.n_states];
    let mut trace = Vec::new();
    loop {
        if trace.len() >= max_iter {
            return Err(Error::FixedPointNotReached {
                iterations: trace.len(),
                trace,
            });
        }
        let next = regularized_backup_with(model, &v, alpha, reg, exec)?;
        let diff = sup_diff(&next, &v);
        trace.push(diff);
        v = next;
        if diff <= tol {
            break;
        }
    }
    let mut sol = tables_from_values(model, &v, alpha, reg, exec)?;
    sol.iterations = trace.len();
    sol.residual_trace = trace;
    Ok(sol)
}

/// Worst violations of the first-order conditions over included states.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktReport {
    /// `|Q - alpha h_f'(pi/mu) - U|` over actions with `pi > 0`.
    pub stationarity: f64,
    /// `pi * beta` where a positive-probability action would need `beta > 0`.
    pub complementary: f64,
    /// `max(0, -beta)` over zero-probability actions on the support.
    pub dual_infeasibility: f64,
    /// `|sum_a pi(a) - 1|`.
    pub normalization: f64,
    /// Probability placed where `mu = 0`.
    pub support: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        [
            self.stationarity,
            self.complementary,
            self.dual_infeasibility,
            self.normalization,
            self.support,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn kkt_residual(sol: &SolutionTables, model: &RegularizedModel, alpha: f64, reg: &Regularizer) -> KktReport {
    let mut rep = KktReport::default();
    for s in (0..model.n_states).filter(|&s| model.included[s]) {
        let (q, mu, pi, u) = (sol.q_row(s), model.mu_row(s), sol.pi.row(s), sol.u[s]);
        rep.normalization = rep.normalization.max((pi.iter().sum::<f64>() - 1.0).abs());
        for a in 0..model.n_actions {
            if mu[a] <= 0.0 {
                rep.support = rep.support.max(pi[a]);
                continue;
            }
            if pi[a] > 0.0 {
                let r = q[a] - alpha * reg.hf_prime(pi[a] / mu[a]) - u;
                rep.stationarity = rep.stationarity.max(r.abs());
                rep.complementary = rep.complementary.max(pi[a] * (-r).max(0.0));
            } else {
                let beta = u + alpha * reg.hf_prime_at_zero() - q[a];
                rep.dual_infeasibility = rep.dual_infeasibility.max((-beta).max(0.0));
            }
        }
    }
    rep
}

fn check_support(model: &RegularizedModel, pi: &Policy) -> Result<()> {
    for s in (0..model.n_states).filter(|&s| model.included[s]) {
        for a in 0..model.n_actions {
            let mass = pi.prob(s, a);
            if model.mu_row(s)[a] <= 0.0 && mass > SUPPORT_TOL {
                return Err(Error::SupportViolation { state: s, action: a, mass });
            }
        }
    }
    Ok(())
}

/// Per-state regularized reward `sum_a pi r - alpha D_f(pi || mu)` and the
/// expected next-state value operator, evaluated iteratively from `rho`.
pub fn regularized_objective(
    model: &RegularizedModel,
    pi: &Policy,
    alpha: f64,
    reg: &Regularizer,
    tol: f64,
) -> Result<f64> {
    Ok(regularized_policy_values(model, pi, alpha, reg, tol)?
        .iter()
        .zip(&model.initial_dist)
        .map(|(v, p)| v * p)
        .sum())
}

/// State values of `pi` under the regularized reward.
pub fn regularized_policy_values(
    model: &RegularizedModel,
    pi: &Policy,
    alpha: f64,
    reg: &Regularizer,
    tol: f64,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if pi.n_states() != model.n_states || pi.n_actions() != model.n_actions {
        return Err(Error::InvalidArgument("policy shape does not match model".into()));
    }
    check_support(model, pi)?;
    let (ns, na) = (model.n_states, model.n_actions);
    let mut r_pi = vec![0.0; ns];
    for s in (0..ns).filter(|&s| model.included[s]) {
        let div = reg.divergence(model.mu_row(s), pi.row(s))?;
        let r: f64 = (0..na)
            .filter(|&a| pi.prob(s, a) > 0.0)
            .map(|a| pi.prob(s, a) * model.reward[s * na + a])
            .sum();
        r_pi[s] = r - alpha * div;
    }
    let mut v = vec![0.0; ns];
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                if !model.included[s] {
                    return 0.0;
                }
                let ev: f64 = (0..na)
                    .filter(|&a| pi.prob(s, a) > 0.0)
                    .map(|a| pi.prob(s, a) * model.next_dist(s, a).iter().zip(&v).map(|(p, v)| p * v).sum::<f64>())
                    .sum();
                r_pi[s] + model.gamma * ev
            })
            .collect();
        let diff = sup_diff(&next, &v);
        v = next;
        if !diff.is_finite() || diff <= tol {
            return Ok(v);
        }
    }
}

/// Largest number of joint grid policies the brute-force search visits.
pub const BRUTE_FORCE_LIMIT: u64 = 100_000_000;

/// All points of the simplex over `support` whose coordinates are multiples
/// of `1 / steps`.
fn simplex_grid(n_actions: usize, support: &[usize], steps: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for i in 0..=left {
            cur.push(i);
            rec(k - 1, left - i, cur, out);
            cur.pop();
        }
    }
    let mut parts = Vec::new();
    rec(support.len(), steps, &mut Vec::new(), &mut parts);
    parts
        .into_iter()
        .map(|p| {
            let mut row = vec![0.0; n_actions];
            for (&a, &k) in support.iter().zip(&p) {
                row[a] = k as f64 / steps as f64;
            }
            row
        })
        .collect()
}

fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Per included state: policy row, regularized reward, next-state row.
type Candidate = (Vec<f64>, f64, Vec<f64>);

/// Exhaustive search over simplex-grid policies with spacing
/// `grid_resolution`, maximizing the regularized objective. Values are
/// computed by an exact linear solve, independently of the backup operator.
pub fn brute_force_policy_search(
    model: &RegularizedModel,
    alpha: f64,
    reg: &Regularizer,
    grid_resolution: f64,
) -> Result<(Policy, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(grid_resolution > 0.0 && grid_resolution <= 1.0) {
        return Err(Error::InvalidArgument("grid resolution must lie in (0, 1]".into()));
    }
    let states: Vec<usize> = (0..model.n_states).filter(|&s| model.included[s]).collect();
    if states.len() > 4 || model.n_actions > 3 {
        return Err(Error::SizeGuard(format!(
            "brute force handles at most 4 states and 3 actions, got {} and {}",
            states.len(),
            model.n_actions
        )));
    }
    let steps = (1.0 / grid_resolution).round() as usize;
    let na = model.n_actions;
    let candidates: Vec<Vec<Candidate>> = states
        .iter()
        .map(|&s| {
            let support: Vec<usize> = (0..na).filter(|&a| model.mu_row(s)[a] > 0.0).collect();
            simplex_grid(na, &support, steps)
                .into_iter()
                .filter_map(|row| {
                    let div = reg.divergence(model.mu_row(s), &row).ok()?;
                    let r: f64 = (0..na).map(|a| row[a] * model.reward[s * na + a]).sum();
                    let reward = r - alpha * div;
                    if !reward.is_finite() {
                        return None;
                    }
                    let next = states
                        .iter()
                        .map(|&sp| (0..na).map(|a| row[a] * model.next_dist(s, a)[sp]).sum())
                        .collect();
                    Some((row, reward, next))
                })
                .collect()
        })
        .collect();
    let total: u64 = candidates.iter().map(|c| c.len() as u64).product();
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard(format!(
            "{total} grid policies exceed the limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    if states.is_empty() || total == 0 {
        return Err(Error::InvalidArgument("no feasible grid policy".into()));
    }
    let rho: Vec<f64> = states.iter().map(|&s| model.initial_dist[s]).collect();
    let n = states.len();
    let inner: u64 = candidates[1..].iter().map(|c| c.len() as u64).product();
    let best_per_first = par::map_indices(candidates[0].len(), Exec::default(), |i0| {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut idx = vec![0usize; n];
        idx[0] = i0;
        for mut k in 0..inner {
            for j in 1..n {
                idx[j] = (k % candidates[j].len() as u64) as usize;
                k /= candidates[j].len() as u64;
            }
            let mut a = vec![vec![0.0; n]; n];
            let mut b = vec![0.0; n];
            for j in 0..n {
                let (_, r, next) = &candidates[j][idx[j]];
                b[j] = *r;
                for m in 0..n {
                    a[j][m] = if j == m { 1.0 } else { 0.0 } - model.gamma * next[m];
                }
            }
            let v = solve_small(a, b);
            let obj: f64 = v.iter().zip(&rho).map(|(v, p)| v * p).sum();
            if obj > best.0 {
                best = (obj, idx.clone());
            }
        }
        best
    });
    let (obj, idx) = best_per_first
        .into_iter()
        .fold((f64::NEG_INFINITY, Vec::new()), |acc, x| if x.0 > acc.0 { x } else { acc });
    let mut probs = Policy::from_weights(model.n_states, na, &model.mu).probs().to_vec();
    for (j, &s) in states.iter().enumerate() {
        probs[s * na..(s + 1) * na].copy_from_slice(&candidates[j][idx[j]].0);
    }
    Ok((Policy::new(model.n_states, na, probs)?, obj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_mdp, random_policy, value_iteration};
    use crate::regularizers::{make_alpha_divergence, make_chi_square, make_reverse_kl};
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalizer_examples() {
        for reg in [make_chi_square(), make_reverse_kl()] {
            let u = solve_normalizer(&[5.0], &[1.0], 1.0, &reg).unwrap();
            assert_abs_diff_eq!(u, 4.0, epsilon = 1e-10);
        }
        let chi = make_chi_square();
        let u = solve_normalizer(&[1.0, 0.0], &[0.5, 0.5], 1.0, &chi).unwrap();
        assert_abs_diff_eq!(u, -0.5, epsilon = 1e-10);
        let pi = optimal_policy_row(&[1.0, 0.0], &[0.5, 0.5], 1.0, &chi, u);
        assert_abs_diff_eq!(pi[0], 0.625, epsilon = 1e-9);
        assert_abs_diff_eq!(pi[1], 0.375, epsilon = 1e-9);
        let v = regularized_state_value(&[1.0, 0.0], &[0.5, 0.5], &pi, 1.0, &chi, u);
        assert_abs_diff_eq!(v, 0.5625, epsilon = 1e-9);

        let kl = make_reverse_kl();
        let u = solve_normalizer(&[1.0, 0.0], &[0.5, 0.5], 1.0, &kl).unwrap();
        assert_abs_diff_eq!(u, (0.5 * (1.0 + (-1.0f64).exp())).ln(), epsilon = 1e-10);
        let pi = optimal_policy_row(&[1.0, 0.0], &[0.5, 0.5], 1.0, &kl, u);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(pi[0], e / (e + 1.0), epsilon = 1e-9);
        assert_eq!(regularized_state_value(&[1.0, 0.0], &[0.5, 0.5], &pi, 1.0, &kl, u), u + 1.0);

        let pi = optimal_policy_row(&[3.0, 1.0, 9.0], &[0.5, 0.5, 0.0], 1.0, &chi, 1.0);
        assert_eq!(pi[2], 0.0);
        assert!(solve_normalizer(&[1.0], &[1.0], 0.0, &chi).is_err());
        assert!(solve_normalizer(&[1.0], &[0.0], 1.0, &chi).is_err());
    }

    #[test]
    fn uniform_q_keeps_behavior() {
        for reg in [make_chi_square(), make_reverse_kl(), make_alpha_divergence(-1.0).unwrap()] {
            let mu = [0.2, 0.3, 0.5];
            let q = [2.0; 3];
            let u = solve_normalizer(&q, &mu, 0.7, &reg).unwrap();
            let pi = optimal_policy_row(&q, &mu, 0.7, &reg, u);
            for a in 0..3 {
                assert_abs_diff_eq!(pi[a], mu[a], epsilon = 1e-9);
            }
            let v = regularized_state_value(&q, &mu, &pi, 0.7, &reg, u);
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-9);
        }
    }

    fn random_model(seed: u64, ns: usize, na: usize, gamma: f64) -> RegularizedModel {
        let mut rng = substream(seed, "model");
        let mdp = random_mdp(ns, na, gamma, 3, &mut rng).unwrap();
        let mu = random_policy(ns, na, 0.05, &mut rng);
        RegularizedModel::from_mdp(&mdp, &mu).unwrap()
    }

    #[test]
    fn fixed_point_kkt_and_sensitivity() {
        let reg = make_chi_square();
        let model = random_model(1, 6, 3, 0.9);
        let sol = solve_fixed_point(&model, 0.3, &reg, 1e-10, 10_000).unwrap();
        let rep = kkt_residual(&sol, &model, 0.3, &reg);
        assert!(rep.max() <= 1e-6, "{rep:?}");
        let mut probs = sol.pi.probs().to_vec();
        let s = (0..6).find(|&s| sol.pi.row(s).iter().filter(|&&p| p > 0.05).count() >= 2).unwrap();
        let a = (0..3).find(|&a| probs[s * 3 + a] > 0.05).unwrap();
        probs[s * 3 + a] += 0.01;
        let sum: f64 = probs[s * 3..s * 3 + 3].iter().sum();
        probs[s * 3..s * 3 + 3].iter_mut().for_each(|p| *p /= sum);
        let mut bad = sol.clone();
        bad.pi = Policy::new(6, 3, probs).unwrap();
        assert!(kkt_residual(&bad, &model, 0.3, &reg).stationarity > 1e-3);
    }

    #[test]
    fn gamma_zero_converges_at_once() {
        let model = random_model(2, 4, 2, 0.0);
        let sol = solve_fixed_point(&model, 1.0, &make_reverse_kl(), 1e-12, 10).unwrap();
        // V = 0 then V1 then V1 again
        assert!(sol.iterations <= 2);
        assert_eq!(sol.residual_trace.last(), Some(&0.0));
    }

    #[test]
    fn iteration_cap_reports_trace() {
        let model = random_model(3, 4, 2, 0.9);
        match solve_fixed_point(&model, 1.0, &make_chi_square(), 1e-12, 3) {
            Err(Error::FixedPointNotReached { iterations, trace }) => {
                assert_eq!(iterations, 3);
                assert_eq!(trace.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_alpha_approaches_value_iteration() {
        // the gap is at most alpha * max(1/mu - 1) / (1 - gamma)
        let mut rng = substream(5, "model");
        let mdp = random_mdp(5, 3, 0.5, 3, &mut rng).unwrap();
        let model = RegularizedModel::from_mdp(&mdp, &Policy::uniform(5, 3)).unwrap();
        let sol = solve_fixed_point(&model, 1e-3, &make_chi_square(), 1e-10, 10_000).unwrap();
        let vi = value_iteration(&mdp, 1e-12).unwrap();
        for s in 0..5 {
            assert!(sol.v[s] <= vi.v[s] + 1e-9);
            assert_abs_diff_eq!(sol.v[s], vi.v[s], epsilon = 1e-2);
        }
    }

    #[test]
    fn softmax_identity_with_uniform_mu() {
        let mut rng = substream(6, "model");
        let mdp = random_mdp(8, 4, 0.9, 3, &mut rng).unwrap();
        let model = RegularizedModel::from_mdp(&mdp, &Policy::uniform(8, 4)).unwrap();
        let alpha = 0.4;
        let sol = solve_fixed_point(&model, alpha, &make_reverse_kl(), 1e-12, 10_000).unwrap();
        for s in 0..8 {
            let q = sol.q_row(s);
            let m = q.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = q.iter().map(|x| ((x - m) / alpha).exp()).sum();
            for a in 0..4 {
                assert_abs_diff_eq!(sol.pi.prob(s, a), ((q[a] - m) / alpha).exp() / z, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn objective_contract() {
        let model = random_model(7, 3, 2, 0.8);
        let reg = make_chi_square();
        let mu = Policy::new(3, 2, model.mu.clone()).unwrap();
        let j_mu = regularized_objective(&model, &mu, 0.5, &reg, 1e-12).unwrap();
        let j_mu_unreg = regularized_objective(&model, &mu, 1e-300, &reg, 1e-12).unwrap();
        assert_abs_diff_eq!(j_mu, j_mu_unreg, epsilon = 1e-10);
        assert!(regularized_objective(&model, &mu, 0.0, &reg, 1e-12).is_err());

        let mut sparse = model.clone();
        sparse.mu = vec![1.0, 0.0, 0.5, 0.5, 0.5, 0.5];
        let off = Policy::uniform(3, 2);
        assert!(matches!(
            regularized_objective(&sparse, &off, 0.5, &reg, 1e-12),
            Err(Error::SupportViolation { state: 0, action: 1, .. })
        ));
    }

    #[test]
    fn brute_force_guard_and_agreement() {
        let big = random_model(8, 5, 2, 0.9);
        assert!(matches!(
            brute_force_policy_search(&big, 1.0, &make_chi_square(), 0.1),
            Err(Error::SizeGuard(_))
        ));
        let model = random_model(9, 2, 2, 0.9);
        for reg in [make_chi_square(), make_reverse_kl()] {
            let sol = solve_fixed_point(&model, 0.5, &reg, 1e-12, 10_000).unwrap();
            let j_star = regularized_objective(&model, &sol.pi, 0.5, &reg, 1e-12).unwrap();
            let (_, j_grid) = brute_force_policy_search(&model, 0.5, &reg, 0.01).unwrap();
            assert!(j_grid <= j_star + 1e-9);
            assert!(j_star - j_grid <= 1e-2, "{j_star} {j_grid}");
        }
    }
}
