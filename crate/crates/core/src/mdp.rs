//! Finite MDPs, the Four Rooms gridworld, rollouts and unregularized
//! dynamic-programming references.

use std::fmt::{self, Write as _};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{self, Rng};

const ROW_TOL: f64 = 1e-12;
const POLICY_TOL: f64 = 1e-10;

/// Dense tabular MDP. `transition` is laid out `[s][a][s']`, `reward` `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if n_states == 0 || n_actions == 0 {
            return bad("MDP needs at least one state and one action".into());
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || initial_dist.len() != n_states
            || terminal.len() != n_states
        {
            return bad("MDP tensor shapes do not match n_states/n_actions".into());
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("discount must lie in [0, 1), got {gamma}"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > ROW_TOL {
                return bad(format!(
                    "transition row (s={}, a={}) is not a distribution (sum {sum})",
                    i / n_actions,
                    i % n_actions
                ));
            }
        }
        let init_sum: f64 = initial_dist.iter().sum();
        if initial_dist.iter().any(|&p| p < 0.0) || (init_sum - 1.0).abs() > 1e-10 {
            return bad("initial distribution does not sum to 1".into());
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let idx = (s * n_actions + a) * n_states + s;
                if transition[idx] != 1.0 || reward[s * n_actions + a] != 0.0 {
                    return bad(format!("terminal state {s} must self-loop with reward 0"));
                }
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            terminal,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal(&self) -> &[bool] {
        &self.terminal
    }

    /// Next-state distribution of `(s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    /// `r(s,a) + gamma * E[v(s')]`, zero for terminal `s`.
    pub fn backup_q(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        let ev: f64 = self.next_dist(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
        self.reward(s, a) + self.gamma * ev
    }

    /// Same MDP with a different start distribution.
    pub fn with_initial_dist(&self, dist: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        if dist.len() != self.n_states {
            return Err(Error::InvalidArgument("initial distribution has wrong length".into()));
        }
        m.initial_dist = dist;
        Self::new(
            m.n_states,
            m.n_actions,
            m.transition,
            m.reward,
            m.gamma,
            m.initial_dist,
            m.terminal,
        )
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let m = self.clone();
        Self::new(
            m.n_states,
            m.n_actions,
            m.transition,
            m.reward,
            gamma,
            m.initial_dist,
            m.terminal,
        )
    }

    /// Human-readable dump of every nonzero transition.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mdp n_states={} n_actions={} gamma={}",
            self.n_states, self.n_actions, self.gamma
        );
        for s in 0..self.n_states {
            let _ = writeln!(
                out,
                "state {s} init={} terminal={}",
                self.initial_dist[s], self.terminal[s]
            );
            for a in 0..self.n_actions {
                let next: Vec<String> = self
                    .next_dist(s, a)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(sp, p)| format!("{sp}:{p}"))
                    .collect();
                let _ = writeln!(out, "  a{a} r={} -> {}", self.reward(s, a), next.join(" "));
            }
        }
        out
    }
}

/// Stochastic policy, rows `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::InvalidArgument("policy shape mismatch".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > POLICY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Policy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Policy {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    /// Builds from unnormalized nonnegative rows; all-zero rows become uniform.
    pub fn from_weights(n_states: usize, n_actions: usize, weights: &[f64]) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for row in weights.chunks(n_actions) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                probs.extend(row.iter().map(|w| w / sum));
            } else {
                probs.extend(std::iter::repeat_n(1.0 / n_actions as f64, n_actions));
            }
        }
        Policy {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.row(s);
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding left u above the cumulative sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Lowest-index argmax of each row.
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }

    /// Deterministic at states where `mask` is set, unchanged elsewhere.
    pub fn greedy_where(&self, mask: &[bool]) -> Policy {
        let mut probs = self.probs.clone();
        for s in (0..self.n_states).filter(|&s| mask[s]) {
            let a = argmax(self.row(s));
            let row = &mut probs[s * self.n_actions..(s + 1) * self.n_actions];
            row.iter_mut().for_each(|p| *p = 0.0);
            row[a] = 1.0;
        }
        Policy {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        }
    }

    /// Total-variation distance between the rows of `self` and `other` at `s`.
    pub fn tv_at(&self, other: &Policy, s: usize) -> f64 {
        0.5 * self
            .row(s)
            .iter()
            .zip(other.row(s))
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
    }
}

/// Lowest index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub policy: Policy,
    pub iterations: usize,
}

/// Unregularized value iteration from `V = 0`, stopped once the sup-norm
/// change drops to `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut iterations = 0;
    loop {
        iterations += 1;
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = mdp.backup_q(s, a, &v);
            }
        }
        let next: Vec<f64> = q
            .chunks(na)
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let diff = sup_diff(&next, &v);
        v = next;
        if diff <= tol {
            break;
        }
    }
    for s in 0..ns {
        for a in 0..na {
            q[s * na + a] = mdp.backup_q(s, a, &v);
        }
    }
    let actions: Vec<usize> = q.chunks(na).map(argmax).collect();
    Ok(ValueSolution {
        v,
        q,
        policy: Policy::deterministic(na, &actions),
        iterations,
    })
}

/// Iterative evaluation of a fixed policy; returns `(V, Q)`.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &Policy, tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if pi.n_states != mdp.n_states || pi.n_actions != mdp.n_actions {
        return Err(Error::InvalidArgument("policy shape does not match MDP".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    loop {
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = mdp.backup_q(s, a, &v);
            }
        }
        let next: Vec<f64> = (0..ns)
            .map(|s| pi.row(s).iter().zip(&q[s * na..(s + 1) * na]).map(|(p, q)| p * q).sum())
            .collect();
        let diff = sup_diff(&next, &v);
        v = next;
        if diff <= tol {
            break;
        }
    }
    for s in 0..ns {
        for a in 0..na {
            q[s * na + a] = mdp.backup_q(s, a, &v);
        }
    }
    Ok((v, q))
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStats {
    pub mean_return: f64,
    pub success_rate: f64,
}

fn sample_index(dist: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Monte Carlo estimate of the discounted return from the initial
/// distribution. An episode succeeds when it enters a terminal state within
/// `cap` steps. Episode `i` draws from its own substream, so the result does
/// not depend on `exec`.
pub fn rollout(
    mdp: &TabularMdp,
    pi: &Policy,
    episodes: usize,
    cap: usize,
    seed: u64,
) -> Result<RolloutStats> {
    rollout_with(mdp, pi, episodes, cap, seed, Exec::default())
}

pub fn rollout_with(
    mdp: &TabularMdp,
    pi: &Policy,
    episodes: usize,
    cap: usize,
    seed: u64,
    exec: Exec,
) -> Result<RolloutStats> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one episode".into()));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("rollout step cap must be at least 1".into()));
    }
    let results = par::map_indices(episodes, exec, |ep| {
        let mut rng = rng::substream_indexed(seed, "rollout", ep as u64);
        let mut s = sample_index(&mdp.initial_dist, &mut rng);
        let mut ret = 0.0;
        let mut discount = 1.0;
        if mdp.terminal[s] {
            return (0.0, true);
        }
        for _ in 0..cap {
            let a = pi.sample(s, &mut rng);
            ret += discount * mdp.reward(s, a);
            discount *= mdp.gamma;
            s = sample_index(mdp.next_dist(s, a), &mut rng);
            if mdp.terminal[s] {
                return (ret, true);
            }
        }
        (ret, false)
    });
    let n = episodes as f64;
    Ok(RolloutStats {
        mean_return: results.iter().map(|r| r.0).sum::<f64>() / n,
        success_rate: results.iter().filter(|r| r.1).count() as f64 / n,
    })
}

/// Random MDP with `branching` successor states per pair, rewards in [0, 1],
/// uniform start distribution and no terminal states.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    branching: usize,
    rng: &mut Rng,
) -> Result<TabularMdp> {
    let k = branching.clamp(1, n_states);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for row in transition.chunks_mut(n_states) {
        let picks = rand::seq::index::sample(rng, n_states, k);
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = w.iter().sum();
        for (i, sp) in picks.iter().enumerate() {
            row[sp] += w[i] / total;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        gamma,
        vec![1.0 / n_states as f64; n_states],
        vec![false; n_states],
    )
}

/// Random full-support policy with probabilities bounded below by `floor`.
pub fn random_policy(n_states: usize, n_actions: usize, floor: f64, rng: &mut Rng) -> Policy {
    let w: Vec<f64> = (0..n_states * n_actions).map(|_| floor + rng.random::<f64>()).collect();
    Policy::from_weights(n_states, n_actions, &w)
}

pub const ACTION_NAMES: [&str; 4] = ["up", "down", "right", "left"];

/// Classic four-rooms layout on an 11x11 grid, row 0 at the top.
/// `#` is wall, `S` the start (bottom-left), `G` the goal (top-right).
pub const FOUR_ROOMS_LAYOUT: [&str; 11] = [
    ".....#....G",
    ".....#.....",
    "...........",
    ".....#.....",
    ".....#.....",
    "#.####.....",
    ".....###.##",
    ".....#.....",
    ".....#.....",
    "...........",
    "S....#.....",
];

pub const FOUR_ROOMS_GAMMA: f64 = 0.9;
pub const FOUR_ROOMS_GOAL_REWARD: f64 = 10.0;

/// A gridworld: the MDP plus the cell geometry needed for plotting,
/// coordinate features and distance-based corruption.
#[derive(Debug, Clone)]
pub struct GridWorld {
    pub mdp: TabularMdp,
    pub width: usize,
    pub height: usize,
    /// `(x, y)` of each state, `y` growing upwards.
    pub positions: Vec<(f64, f64)>,
    pub start: usize,
    pub goal: usize,
    pub layout: Vec<String>,
}

impl GridWorld {
    pub fn goal_position(&self) -> (f64, f64) {
        self.positions[self.goal]
    }

    /// The grid corner farthest from the goal.
    pub fn minimal_position(&self) -> (f64, f64) {
        (0.0, 0.0)
    }

    /// Start distribution uniform over non-terminal cells.
    pub fn uniform_start_dist(&self) -> Vec<f64> {
        let live: Vec<usize> = (0..self.mdp.n_states()).filter(|&s| !self.mdp.is_terminal(s)).collect();
        let mut d = vec![0.0; self.mdp.n_states()];
        for &s in &live {
            d[s] = 1.0 / live.len() as f64;
        }
        d
    }

    pub fn state_at(&self, x: usize, y: usize) -> Option<usize> {
        self.positions
            .iter()
            .position(|&(px, py)| px == x as f64 && py == y as f64)
    }

    /// ASCII map with one character per cell, overlaying per-state glyphs.
    pub fn render(&self, glyph: impl Fn(usize) -> char) -> String {
        let mut out = String::new();
        for (row, line) in self.layout.iter().enumerate() {
            let y = self.height - 1 - row;
            for (x, c) in line.chars().enumerate() {
                out.push(match (c, self.state_at(x, y)) {
                    ('#', _) => '#',
                    (_, Some(s)) => glyph(s),
                    _ => '?',
                });
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for GridWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(|s| {
            if s == self.start {
                'S'
            } else if s == self.goal {
                'G'
            } else {
                '.'
            }
        }))
    }
}

/// Builds a deterministic gridworld from rows of `.`/`#`/`S`/`G`.
/// Moves into walls or off the grid leave the agent in place; entering the
/// goal pays `goal_reward` and the goal is absorbing.
pub fn build_grid(layout: &[&str], gamma: f64, goal_reward: f64) -> Result<GridWorld> {
    let height = layout.len();
    let width = layout.first().map_or(0, |r| r.len());
    if height == 0 || layout.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("layout rows must be nonempty and equal length".into()));
    }
    let mut positions = Vec::new();
    let mut cell_state = vec![vec![None; width]; height];
    let (mut start, mut goal) = (None, None);
    for (row, line) in layout.iter().enumerate() {
        for (x, c) in line.chars().enumerate() {
            if c == '#' {
                continue;
            }
            let s = positions.len();
            positions.push((x as f64, (height - 1 - row) as f64));
            cell_state[row][x] = Some(s);
            match c {
                'S' => start = Some(s),
                'G' => goal = Some(s),
                '.' => {}
                other => {
                    return Err(Error::InvalidArgument(format!("unknown layout glyph {other:?}")))
                }
            }
        }
    }
    let (start, goal) = match (start, goal) {
        (Some(s), Some(g)) => (s, g),
        _ => return Err(Error::InvalidArgument("layout needs one S and one G".into())),
    };
    let ns = positions.len();
    let na = 4;
    let deltas: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)]; // (drow, dx)
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for (row, cells) in cell_state.iter().enumerate() {
        for (x, cell) in cells.iter().enumerate() {
            let Some(s) = *cell else { continue };
            for (a, (dr, dx)) in deltas.iter().enumerate() {
                let next = if s == goal {
                    s
                } else {
                    let (r2, x2) = (row as isize + dr, x as isize + dx);
                    if r2 < 0 || x2 < 0 || r2 >= height as isize || x2 >= width as isize {
                        s
                    } else {
                        cell_state[r2 as usize][x2 as usize].unwrap_or(s)
                    }
                };
                transition[(s * na + a) * ns + next] = 1.0;
                if next == goal && s != goal {
                    reward[s * na + a] = goal_reward;
                }
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[start] = 1.0;
    let mut terminal = vec![false; ns];
    terminal[goal] = true;
    let mdp = TabularMdp::new(ns, na, transition, reward, gamma, initial, terminal)?;
    Ok(GridWorld {
        mdp,
        width,
        height,
        positions,
        start,
        goal,
        layout: layout.iter().map(|s| s.to_string()).collect(),
    })
}

/// The Four Rooms environment: +10 on entering the goal, discount 0.9.
pub fn build_four_rooms() -> GridWorld {
    build_grid(&FOUR_ROOMS_LAYOUT, FOUR_ROOMS_GAMMA, FOUR_ROOMS_GOAL_REWARD)
        .expect("built-in layout is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Dense Gaussian elimination with partial pivoting.
    fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
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

    fn chain() -> TabularMdp {
        // two states, two actions: a0 stays, a1 swaps; rewards differ per state
        let t = vec![
            1.0, 0.0, 0.0, 1.0, //
            0.0, 1.0, 1.0, 0.0,
        ];
        TabularMdp::new(2, 2, t, vec![1.0, 0.0, 0.0, 2.0], 0.8, vec![1.0, 0.0], vec![false; 2]).unwrap()
    }

    #[test]
    fn four_rooms_geometry() {
        let g = build_four_rooms();
        assert_eq!(g.mdp.n_states(), 104);
        assert_eq!(g.mdp.n_actions(), 4);
        assert_eq!(g.mdp.gamma(), 0.9);
        assert_eq!(g.positions[g.start], (0.0, 0.0));
        assert_eq!(g.positions[g.goal], (10.0, 10.0));
        assert!(g.mdp.is_terminal(g.goal));
        // left from the start hits the boundary
        let left = g.mdp.next_dist(g.start, 3);
        assert_eq!(left[g.start], 1.0);
        assert_eq!(g.mdp.reward(g.start, 3), 0.0);
        // wall at (5, 10) blocks moving right from (4, 10)
        let s = g.state_at(4, 10).unwrap();
        assert_eq!(g.mdp.next_dist(s, 2)[s], 1.0);
        // entering the goal from below pays 10
        let below = g.state_at(10, 9).unwrap();
        assert_eq!(g.mdp.reward(below, 0), 10.0);
        assert_eq!(g.mdp.next_dist(below, 0)[g.goal], 1.0);
        assert!(g.to_string().starts_with(".....#....G"));
    }

    #[test]
    fn value_iteration_on_four_rooms() {
        let g = build_four_rooms();
        let sol = value_iteration(&g.mdp, 1e-10).unwrap();
        let adjacent = g.state_at(9, 10).unwrap();
        let two_away = g.state_at(8, 10).unwrap();
        assert_abs_diff_eq!(sol.v[adjacent], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.v[two_away], 9.0, epsilon = 1e-9);
        assert_eq!(sol.v[g.goal], 0.0);
        // shortest path from the start is 20 moves
        assert_abs_diff_eq!(sol.v[g.start], 10.0 * 0.9f64.powi(19), epsilon = 1e-9);
        let stats = rollout(&g.mdp, &sol.policy, 5, 100, 1).unwrap();
        assert_eq!(stats.success_rate, 1.0);
    }

    #[test]
    fn value_iteration_monotone_from_zero() {
        let g = build_four_rooms();
        let mut v = vec![0.0; g.mdp.n_states()];
        for _ in 0..40 {
            let next: Vec<f64> = (0..g.mdp.n_states())
                .map(|s| (0..4).map(|a| g.mdp.backup_q(s, a, &v)).fold(f64::MIN, f64::max))
                .collect();
            assert!(next.iter().zip(&v).all(|(n, o)| *n >= o - 1e-12));
            v = next;
        }
    }

    #[test]
    fn policy_evaluation_matches_linear_solve() {
        let m = chain();
        let pi = Policy::uniform(2, 2);
        let (v, _) = policy_evaluation(&m, &pi, 1e-13).unwrap();
        // (I - gamma P_pi) V = r_pi
        let p = [[0.5, 0.5], [0.5, 0.5]];
        let a = (0..2)
            .map(|i| (0..2).map(|j| if i == j { 1.0 } else { 0.0 } - 0.8 * p[i][j]).collect())
            .collect();
        let exact = solve_linear(a, vec![0.5, 1.0]);
        assert_abs_diff_eq!(v[0], exact[0], epsilon = 1e-11);
        assert_abs_diff_eq!(v[1], exact[1], epsilon = 1e-11);

        let opt = value_iteration(&m, 1e-12).unwrap();
        let (vg, _) = policy_evaluation(&m, &opt.policy, 1e-12).unwrap();
        for s in 0..2 {
            assert_abs_diff_eq!(vg[s], opt.v[s], epsilon = 1e-9);
        }

        let myopic = m.with_gamma(0.0).unwrap();
        let (v0, _) = policy_evaluation(&myopic, &pi, 1e-12).unwrap();
        assert_eq!(v0, vec![0.5, 1.0]);
    }

    #[test]
    fn rollout_contract() {
        let g = build_four_rooms();
        let uniform = Policy::uniform(g.mdp.n_states(), 4);
        assert!(rollout(&g.mdp, &uniform, 0, 10, 0).is_err());
        assert!(rollout(&g.mdp, &uniform, 10, 0, 0).is_err());
        let a = rollout(&g.mdp, &uniform, 200, 20, 9).unwrap();
        let b = rollout_with(&g.mdp, &uniform, 200, 20, 9, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        // 20 random moves cannot cover the 20-step shortest path reliably
        assert!(a.success_rate < 0.05, "{a:?}");
    }

    #[test]
    fn invalid_mdps_rejected() {
        let bad_row = TabularMdp::new(1, 1, vec![0.5], vec![0.0], 0.5, vec![1.0], vec![false]);
        assert!(bad_row.is_err());
        let bad_gamma = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0], vec![false]);
        assert!(bad_gamma.is_err());
        let bad_terminal = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![1.0], vec![true]);
        assert!(bad_terminal.is_err());
        assert!(Policy::new(1, 2, vec![0.7, 0.7]).is_err());
    }

    #[test]
    fn random_mdps_are_stochastic() {
        let mut rng = rng::substream(3, "test");
        let m = random_mdp(12, 3, 0.9, 4, &mut rng).unwrap();
        for s in 0..12 {
            for a in 0..3 {
                assert!((m.next_dist(s, a).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let pi = random_policy(12, 3, 0.1, &mut rng);
        assert!(Policy::new(12, 3, pi.probs().to_vec()).is_ok());
        assert!(m.dump().contains("mdp n_states=12"));
    }
}
