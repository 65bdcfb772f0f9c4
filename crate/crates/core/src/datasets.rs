//! Offline datasets: collection, corruption protocols, empirical models and
//! a plain-text file format.
//!
//! The file holds one header line followed by one transition per line:
//!
//! ```text
//! #ivr-dataset n_states=104 n_actions=4 gamma=0.9 count=2 policy=uniform seed=3 goal=10,10 minimal=0,0
//! 0 2 0 1 0
//! 1 0 10 7 1
//! ```
//!
//! Rewards are written with the shortest round-trip float representation, so
//! save followed by load reproduces the dataset exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::par::{self, Exec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetMeta {
    /// Free-form label without whitespace, e.g. `uniform` or `mix:0.05`.
    pub policy: String,
    pub seed: u64,
    pub goal: Option<(f64, f64)>,
    pub minimal: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, meta: DatasetMeta) -> Self {
        OfflineDataset {
            n_states,
            n_actions,
            gamma,
            transitions: Vec::new(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Number of transitions that earn a positive reward.
    pub fn reward_hits(&self) -> usize {
        self.transitions.iter().filter(|t| t.r > 0.0).count()
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Insufficient("dataset is empty".into()))
        } else {
            Ok(())
        }
    }

    fn with_transitions(&self, transitions: Vec<Transition>, policy: String, seed: u64) -> Self {
        OfflineDataset {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            transitions,
            meta: DatasetMeta {
                policy,
                seed,
                ..self.meta.clone()
            },
        }
    }
}

fn sample_from(dist: &[f64], rng: &mut rng::Rng) -> usize {
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

/// Rolls out `n_traj` trajectories of `behavior` from the MDP's initial
/// distribution, each cut at `cap` steps or at a terminal state.
pub fn collect(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_traj: usize,
    cap: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    collect_with(mdp, behavior, n_traj, cap, seed, Exec::default())
}

pub fn collect_with(
    mdp: &TabularMdp,
    behavior: &Policy,
    n_traj: usize,
    cap: usize,
    seed: u64,
    exec: Exec,
) -> Result<OfflineDataset> {
    if cap == 0 {
        return Err(Error::InvalidArgument("trajectory cap must be at least 1".into()));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(Error::InvalidArgument("behavior policy shape does not match MDP".into()));
    }
    let trajs = par::map_indices(n_traj, exec, |i| {
        let mut rng = rng::substream_indexed(seed, "data", i as u64);
        let mut out = Vec::new();
        let mut s = sample_from(mdp.initial_dist(), &mut rng);
        for _ in 0..cap {
            if mdp.is_terminal(s) {
                break;
            }
            let a = behavior.sample(s, &mut rng);
            let s_next = sample_from(mdp.next_dist(s, a), &mut rng);
            let done = mdp.is_terminal(s_next);
            out.push(Transition {
                s,
                a,
                r: mdp.reward(s, a),
                s_next,
                done,
            });
            s = s_next;
        }
        out
    });
    let mut ds = OfflineDataset::new(
        mdp.n_states(),
        mdp.n_actions(),
        mdp.gamma(),
        DatasetMeta {
            policy: "behavior".into(),
            seed,
            ..Default::default()
        },
    );
    ds.transitions = trajs.into_iter().flatten().collect();
    Ok(ds)
}

/// Maximum-likelihood tabular model of a dataset.
#[derive(Debug, Clone)]
pub struct EmpiricalModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `[s][a]`; rows of visited states sum to 1, unvisited rows are zero.
    pub mu_hat: Vec<f64>,
    /// `[s][a][s']`; zero outside the support.
    pub t_hat: Vec<f64>,
    /// `[s][a]`; zero outside the support.
    pub r_hat: Vec<f64>,
    pub visit_counts: Vec<usize>,
    pub support: Vec<bool>,
    /// States that appear as `s_next` of a `done` transition.
    pub terminal: Vec<bool>,
}

impl EmpiricalModel {
    pub fn visited(&self, s: usize) -> bool {
        (0..self.n_actions).any(|a| self.support[s * self.n_actions + a])
    }

    pub fn visited_states(&self) -> Vec<bool> {
        (0..self.n_states).map(|s| self.visited(s)).collect()
    }

    pub fn mu_row(&self, s: usize) -> &[f64] {
        &self.mu_hat[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn t_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.t_hat[start..start + self.n_states]
    }

    /// `mu_hat` as a policy, uniform at unvisited states.
    pub fn behavior_policy(&self) -> Policy {
        Policy::from_weights(self.n_states, self.n_actions, &self.mu_hat)
    }
}

pub fn empirical_model(dataset: &OfflineDataset) -> Result<EmpiricalModel> {
    dataset.require_nonempty()?;
    let (ns, na) = (dataset.n_states, dataset.n_actions);
    let mut counts = vec![0usize; ns * na];
    let mut next_counts = vec![0usize; ns * na * ns];
    let mut r_sum = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    for (line, t) in dataset.transitions.iter().enumerate() {
        if t.s >= ns || t.a >= na || t.s_next >= ns {
            return Err(Error::InvalidArgument(format!(
                "transition {line} has ids out of range"
            )));
        }
        let sa = t.s * na + t.a;
        counts[sa] += 1;
        next_counts[sa * ns + t.s_next] += 1;
        r_sum[sa] += t.r;
        if t.done {
            terminal[t.s_next] = true;
        }
    }
    let mut mu_hat = vec![0.0; ns * na];
    for s in 0..ns {
        let n: usize = counts[s * na..(s + 1) * na].iter().sum();
        if n > 0 {
            for a in 0..na {
                mu_hat[s * na + a] = counts[s * na + a] as f64 / n as f64;
            }
        }
    }
    let mut t_hat = vec![0.0; ns * na * ns];
    let mut r_hat = vec![0.0; ns * na];
    for sa in 0..ns * na {
        if counts[sa] > 0 {
            let n = counts[sa] as f64;
            r_hat[sa] = r_sum[sa] / n;
            for sp in 0..ns {
                t_hat[sa * ns + sp] = next_counts[sa * ns + sp] as f64 / n;
            }
        }
    }
    Ok(EmpiricalModel {
        n_states: ns,
        n_actions: na,
        gamma: dataset.gamma,
        mu_hat,
        t_hat,
        r_hat,
        support: counts.iter().map(|&c| c > 0).collect(),
        visit_counts: counts,
        terminal,
    })
}

/// `floor(x + 1/2)` for nonnegative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Draws `round(ratio * total)` expert transitions and the rest from `random`,
/// without replacement, and shuffles the union.
pub fn mix(
    expert: &OfflineDataset,
    random: &OfflineDataset,
    expert_ratio: f64,
    total: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if !(0.0..=1.0).contains(&expert_ratio) {
        return Err(Error::InvalidArgument(format!(
            "expert ratio must lie in [0, 1], got {expert_ratio}"
        )));
    }
    if expert.n_states != random.n_states || expert.n_actions != random.n_actions {
        return Err(Error::InvalidArgument("mixed datasets disagree on shape".into()));
    }
    let n_expert = round_half_up(expert_ratio * total as f64).min(total);
    let n_random = total - n_expert;
    if expert.len() < n_expert || random.len() < n_random {
        return Err(Error::Insufficient(format!(
            "mix needs {n_expert} expert and {n_random} random transitions, have {} and {}",
            expert.len(),
            random.len()
        )));
    }
    let mut rng = rng::substream(seed, "mix");
    let mut out: Vec<Transition> = rand::seq::index::sample(&mut rng, expert.len(), n_expert)
        .into_iter()
        .map(|i| expert.transitions[i])
        .collect();
    out.extend(
        rand::seq::index::sample(&mut rng, random.len(), n_random)
            .into_iter()
            .map(|i| random.transitions[i]),
    );
    out.shuffle(&mut rng);
    Ok(expert.with_transitions(out, format!("mix:{expert_ratio}"), seed))
}

/// Normalized squared distance from the reference corner; 0 there, 1 at the goal.
pub fn discard_distance(pos: (f64, f64), goal: (f64, f64), minimal: (f64, f64)) -> f64 {
    let d2 = |p: (f64, f64)| (p.0 - minimal.0).powi(2) + (p.1 - minimal.1).powi(2);
    d2(pos) / d2(goal)
}

/// Keeps each transition iff a fresh uniform draw exceeds
/// `discard_distance(pos(s)) * hardness`. Transitions near the goal are the
/// most likely to be dropped.
pub fn distance_discard(
    dataset: &OfflineDataset,
    positions: &[(f64, f64)],
    goal: (f64, f64),
    minimal: (f64, f64),
    hardness: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if !(hardness >= 0.0) {
        return Err(Error::InvalidArgument(format!("hardness must be >= 0, got {hardness}")));
    }
    if positions.len() != dataset.n_states {
        return Err(Error::InvalidArgument("need one position per state".into()));
    }
    if goal == minimal {
        return Err(Error::InvalidArgument("goal and reference position coincide".into()));
    }
    let mut rng = rng::substream(seed, "discard");
    let kept = dataset
        .transitions
        .iter()
        .filter(|t| {
            let u: f64 = rng.random();
            u > discard_distance(positions[t.s], goal, minimal) * hardness
        })
        .copied()
        .collect();
    let mut out = dataset.with_transitions(kept, format!("{}+discard:{hardness}", dataset.meta.policy), seed);
    out.meta.goal = Some(goal);
    out.meta.minimal = Some(minimal);
    Ok(out)
}

const MAGIC: &str = "#ivr-dataset";

fn fmt_pair(p: (f64, f64)) -> String {
    format!("{},{}", p.0, p.1)
}

pub fn to_text(dataset: &OfflineDataset) -> Result<String> {
    if dataset.meta.policy.chars().any(char::is_whitespace) || dataset.meta.policy.contains('=') {
        return Err(Error::InvalidArgument("policy label must not contain spaces or '='".into()));
    }
    let mut out = String::new();
    let _ = write!(
        out,
        "{MAGIC} n_states={} n_actions={} gamma={} count={} policy={} seed={}",
        dataset.n_states,
        dataset.n_actions,
        dataset.gamma,
        dataset.len(),
        if dataset.meta.policy.is_empty() { "-" } else { &dataset.meta.policy },
        dataset.meta.seed
    );
    if let Some(g) = dataset.meta.goal {
        let _ = write!(out, " goal={}", fmt_pair(g));
    }
    if let Some(m) = dataset.meta.minimal {
        let _ = write!(out, " minimal={}", fmt_pair(m));
    }
    out.push('\n');
    for t in &dataset.transitions {
        let _ = writeln!(out, "{} {} {:?} {} {}", t.s, t.a, t.r, t.s_next, u8::from(t.done));
    }
    Ok(out)
}

pub fn save(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    fs::write(path, to_text(dataset)?)?;
    Ok(())
}

/// Result of reading a dataset file. `warning` is set for empty files.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: OfflineDataset,
    pub warning: Option<String>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_pair(v: &str, line: usize) -> Result<(f64, f64)> {
    let (x, y) = v.split_once(',').ok_or_else(|| parse_err(line, format!("bad pair {v:?}")))?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line, format!("bad number {s:?}")));
    Ok((num(x)?, num(y)?))
}

pub fn from_text(text: &str) -> Result<Loaded> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let Some((_, header)) = lines.next().filter(|(_, l)| !l.trim().is_empty()) else {
        let dataset = OfflineDataset::new(0, 0, 0.0, DatasetMeta::default());
        return Ok(Loaded {
            dataset,
            warning: Some("dataset file is empty".into()),
        });
    };
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(parse_err(1, format!("missing {MAGIC} header")));
    }
    let (mut ns, mut na, mut gamma, mut count) = (None, None, None, None);
    let mut meta = DatasetMeta::default();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| parse_err(1, format!("bad field {tok:?}")))?;
        let int = || v.parse::<usize>().map_err(|_| parse_err(1, format!("bad value for {k}")));
        match k {
            "n_states" => ns = Some(int()?),
            "n_actions" => na = Some(int()?),
            "count" => count = Some(int()?),
            "gamma" => gamma = Some(v.parse::<f64>().map_err(|_| parse_err(1, "bad gamma"))?),
            "policy" => meta.policy = if v == "-" { String::new() } else { v.to_string() },
            "seed" => meta.seed = v.parse().map_err(|_| parse_err(1, "bad seed"))?,
            "goal" => meta.goal = Some(parse_pair(v, 1)?),
            "minimal" => meta.minimal = Some(parse_pair(v, 1)?),
            _ => return Err(parse_err(1, format!("unknown header field {k:?}"))),
        }
    }
    let missing = |f: &str| parse_err(1, format!("header lacks {f}"));
    let ns = ns.ok_or_else(|| missing("n_states"))?;
    let na = na.ok_or_else(|| missing("n_actions"))?;
    let gamma = gamma.ok_or_else(|| missing("gamma"))?;
    let count = count.ok_or_else(|| missing("count"))?;
    let mut ds = OfflineDataset::new(ns, na, gamma, meta);
    let mut last = 1;
    for (no, line) in lines {
        last = no;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(parse_err(no, format!("expected 5 fields, found {}", f.len())));
        }
        let id = |s: &str, bound: usize, what: &str| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| parse_err(no, format!("bad {what} {s:?}")))?;
            if v >= bound {
                return Err(parse_err(no, format!("{what} {v} out of range")));
            }
            Ok(v)
        };
        let t = Transition {
            s: id(f[0], ns, "state")?,
            a: id(f[1], na, "action")?,
            r: f[2].parse().map_err(|_| parse_err(no, format!("bad reward {:?}", f[2])))?,
            s_next: id(f[3], ns, "next state")?,
            done: match f[4] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(no, format!("bad done flag {other:?}"))),
            },
        };
        ds.transitions.push(t);
    }
    if ds.len() != count {
        return Err(parse_err(
            last + 1,
            format!("header announces {count} transitions, file has {}", ds.len()),
        ));
    }
    let warning = ds.is_empty().then(|| "dataset has no transitions".to_string());
    Ok(Loaded { dataset: ds, warning })
}

pub fn load(path: &Path) -> Result<Loaded> {
    from_text(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::build_four_rooms;

    fn tiny() -> OfflineDataset {
        let mut ds = OfflineDataset::new(3, 2, 0.9, DatasetMeta::default());
        let t = |s, a, r, s_next, done| Transition { s, a, r, s_next, done };
        ds.transitions = vec![
            t(0, 0, 0.0, 1, false),
            t(0, 0, 0.0, 1, false),
            t(0, 0, 1.0, 2, true),
            t(0, 1, 0.5, 0, false),
            t(1, 1, 0.1, 2, true),
        ];
        ds
    }

    #[test]
    fn four_rooms_collection() {
        let g = build_four_rooms();
        let uniform = Policy::uniform(104, 4);
        let ds = collect(&g.mdp, &uniform, 30, 20, 7).unwrap();
        assert_eq!(ds.len(), 600);
        assert!(ds.transitions.iter().all(|t| t.s == g.start || ds.transitions.iter().any(|u| u.s_next == t.s)));
        let again = collect_with(&g.mdp, &uniform, 30, 20, 7, Exec::Sequential).unwrap();
        assert_eq!(to_text(&ds).unwrap(), to_text(&again).unwrap());
        assert!(collect(&g.mdp, &uniform, 1, 0, 7).is_err());

        let mut at_goal = vec![0.0; 104];
        at_goal[g.goal] = 1.0;
        let stuck = g.mdp.with_initial_dist(at_goal).unwrap();
        assert!(collect(&stuck, &uniform, 1, 20, 7).unwrap().is_empty());
    }

    #[test]
    fn empirical_counts() {
        let m = empirical_model(&tiny()).unwrap();
        assert_eq!(m.mu_row(0), &[0.75, 0.25]);
        assert_eq!(m.mu_row(2), &[0.0, 0.0]);
        assert!(!m.support[2]);
        assert_eq!(m.t_row(0, 0), &[0.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert!((m.r_hat[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.visit_counts.iter().sum::<usize>(), 5);
        assert!(m.terminal[2] && !m.terminal[1]);
        assert!(m.visited(1) && !m.visited(2));
        let empty = OfflineDataset::new(2, 2, 0.9, DatasetMeta::default());
        assert!(empirical_model(&empty).is_err());
    }

    #[test]
    fn deterministic_env_gives_one_hot_rows() {
        let g = build_four_rooms();
        let ds = collect(&g.mdp.with_initial_dist(g.uniform_start_dist()).unwrap(), &Policy::uniform(104, 4), 50, 20, 1).unwrap();
        let m = empirical_model(&ds).unwrap();
        for s in 0..104 {
            for a in 0..4 {
                let row = m.t_row(s, a);
                if m.support[s * 4 + a] {
                    assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                } else {
                    assert!(row.iter().all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn mix_counts() {
        let mut expert = tiny();
        let mut random = tiny();
        expert.transitions = (0..1000).map(|i| Transition { s: 0, a: 0, r: i as f64, s_next: 1, done: false }).collect();
        random.transitions = (0..20000).map(|i| Transition { s: 1, a: 1, r: i as f64, s_next: 0, done: false }).collect();
        let m = mix(&expert, &random, 0.05, 10_000, 3).unwrap();
        assert_eq!(m.len(), 10_000);
        assert_eq!(m.transitions.iter().filter(|t| t.s == 0).count(), 500);
        assert!(mix(&expert, &random, 0.0, 10_000, 3).unwrap().transitions.iter().all(|t| t.s == 1));
        assert!(mix(&expert, &random, 1.0, 1000, 3).unwrap().transitions.iter().all(|t| t.s == 0));
        assert!(matches!(mix(&expert, &random, 0.2, 10_000, 3), Err(Error::Insufficient(_))));
        // 0.125 * 20 = 2.5 rounds up
        assert_eq!(mix(&expert, &random, 0.125, 20, 3).unwrap().transitions.iter().filter(|t| t.s == 0).count(), 3);
    }

    #[test]
    fn discard_edge_cases() {
        let g = build_four_rooms();
        let ds = collect(&g.mdp.with_initial_dist(g.uniform_start_dist()).unwrap(), &Policy::uniform(104, 4), 30, 20, 4).unwrap();
        let (goal, min) = (g.goal_position(), g.minimal_position());
        let same = distance_discard(&ds, &g.positions, goal, min, 0.0, 9).unwrap();
        assert_eq!(same.transitions, ds.transitions);
        let hard = distance_discard(&ds, &g.positions, goal, min, 1.0, 9).unwrap();
        assert!(hard.transitions.iter().filter(|t| t.s == g.start).count() == ds.transitions.iter().filter(|t| t.s == g.start).count());
        assert!(hard.len() < ds.len());
        assert!(distance_discard(&ds, &g.positions, goal, min, -1.0, 9).is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let mut ds = tiny();
        ds.transitions[3].r = 0.1 + 0.2;
        ds.meta.goal = Some((10.0, 10.0));
        ds.meta.minimal = Some((0.0, 0.0));
        ds.meta.policy = "mix:0.05".into();
        let text = to_text(&ds).unwrap();
        let back = from_text(&text).unwrap();
        assert_eq!(back.dataset, ds);
        assert!(back.warning.is_none());

        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect::<String>() + "0 1 0.5";
        match from_text(&truncated) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let short: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_text(&short), Err(Error::Parse { .. })));
        let empty = from_text("").unwrap();
        assert!(empty.dataset.is_empty() && empty.warning.is_some());
        assert!(matches!(from_text("garbage\n"), Err(Error::Parse { line: 1, .. })));
    }
}
