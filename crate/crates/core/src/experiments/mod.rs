//! Experiment drivers behind the `ivr` binary.
//!
//! Each command reads its own section of a TOML config file, runs every
//! (seed, setting) cell and writes CSV files whose first line is
//! `# config_hash=<hash> seed=<seeds>`. Cells run in parallel; rows are
//! assembled in a fixed order, so reruns give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{self, OfflineDataset};
use crate::error::{Error, Result};
use crate::features::{make_coordinate_features, FeatureMap};
use crate::learners::{Algo, Evaluator, LearnerConfig, LearnerState};
use crate::mdp::{build_four_rooms, policy_evaluation, rollout, GridWorld, Policy, TabularMdp};
use crate::par::Exec;

mod commands;

pub use commands::{
    cmd_fourrooms, cmd_noisy, cmd_smalldata, cmd_solve, cmd_sweep, cmd_toy, cmd_train, small_data_base, FourRoomsRow, NoisyRow,
    SmallDataRow, SweepRow,
};

/// Whole config file; every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub solve: SolveConfig,
    pub fourrooms: FourRoomsConfig,
    pub noisy: NoisyConfig,
    pub smalldata: SmallDataConfig,
    pub toy: ToyConfig,
    pub sweep: SweepConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Replaces the seed list of every section.
    pub fn override_seed(&mut self, seed: u64) {
        let one = vec![seed];
        self.solve.seeds = one.clone();
        self.fourrooms.seeds = one.clone();
        self.noisy.seeds = one.clone();
        self.smalldata.seeds = one.clone();
        self.toy.seeds = one.clone();
        self.sweep.seeds = one.clone();
        self.train.seeds = one;
    }
}

/// Tabular learning rate used when `lr` is unset. The mean-loss gradient of
/// one table entry is scaled by that entry's share of the batch, so tabular
/// runs need a far larger step than the per-sample default.
pub const TABULAR_LR: f64 = 1.0;

/// Training hyperparameters shared by the learning commands. `lr` sets all
/// three learning rates; unset means [`TABULAR_LR`] for tabular runs and the
/// linear default otherwise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Option<f64>,
    pub soft_update_lambda: f64,
    pub double_q: bool,
    pub beta_awr: f64,
    pub eql_clip: f64,
    pub eql_residual_scale: f64,
    pub sql_drop_one_plus: bool,
    pub cql_weight: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        let d = LearnerConfig::default();
        TrainParams {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: None,
            soft_update_lambda: d.soft_update_lambda,
            double_q: true,
            beta_awr: d.beta_awr,
            eql_clip: d.eql_clip,
            eql_residual_scale: d.eql_residual_scale,
            sql_drop_one_plus: d.sql_drop_one_plus,
            cql_weight: d.cql_weight,
        }
    }
}

impl TrainParams {
    /// Learner config for one cell; `temperature` is alpha for SQL-family
    /// learners and tau for IQL.
    pub fn learner(&self, algo: Algo, temperature: Option<f64>, features: Option<Arc<FeatureMap>>, seed: u64) -> LearnerConfig {
        let mut c = LearnerConfig::for_algo(algo);
        let lr = match features {
            Some(f) => {
                c = c.linear(f);
                self.lr
            }
            None => Some(self.lr.unwrap_or(TABULAR_LR)),
        };
        if let Some(lr) = lr {
            c.lr_v = lr;
            c.lr_q = lr;
            c.lr_pi = lr;
        }
        match (algo, temperature) {
            (Algo::Iql, Some(t)) => c.tau = t,
            (_, Some(t)) => c.alpha = t,
            _ => {}
        }
        c.steps = self.steps;
        c.batch_size = self.batch_size;
        c.soft_update_lambda = self.soft_update_lambda;
        c.double_q = self.double_q;
        c.beta_awr = self.beta_awr;
        c.eql_clip = self.eql_clip;
        c.eql_residual_scale = self.eql_residual_scale;
        c.sql_drop_one_plus = self.sql_drop_one_plus;
        c.cql_weight = self.cql_weight;
        c.seed = seed;
        c
    }
}

/// Greedy-policy evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub episodes: usize,
    pub cap: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { episodes: 100, cap: 100 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub seeds: Vec<u64>,
    pub env: String,
    /// Dataset file; when unset, data is collected with the uniform behavior.
    pub dataset: Option<PathBuf>,
    /// `empirical` solves on the dataset's model, `uniform` on the true
    /// dynamics with a uniform behavior policy.
    pub model: String,
    pub regularizer: String,
    pub alpha: f64,
    pub n_traj: usize,
    pub cap: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            seeds: vec![0],
            env: "four_rooms".into(),
            dataset: None,
            model: "empirical".into(),
            regularizer: "chi_square".into(),
            alpha: 0.5,
            n_traj: 30,
            cap: 20,
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FourRoomsConfig {
    pub seeds: Vec<u64>,
    pub n_traj: usize,
    pub cap: usize,
    pub sql_alpha: f64,
    pub eql_alpha: f64,
    pub iql_tau: f64,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl Default for FourRoomsConfig {
    fn default() -> Self {
        FourRoomsConfig {
            seeds: default_seeds(),
            n_traj: 30,
            cap: 20,
            sql_alpha: 0.5,
            eql_alpha: 0.5,
            iql_tau: 0.9,
            train: TrainParams::default(),
            eval: EvalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NoisyConfig {
    pub seeds: Vec<u64>,
    /// Expert fractions of the mixed dataset.
    pub ratios: Vec<f64>,
    pub total: usize,
    pub expert_epsilon: f64,
    pub cap: usize,
    pub algos: Vec<String>,
    pub sql_alpha: f64,
    pub eql_alpha: f64,
    pub iql_tau: f64,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl Default for NoisyConfig {
    fn default() -> Self {
        NoisyConfig {
            seeds: default_seeds(),
            ratios: vec![0.01, 0.05, 0.1, 0.2, 0.3],
            total: 10_000,
            expert_epsilon: 0.1,
            cap: 20,
            algos: vec!["sql".into(), "eql".into(), "iql".into()],
            sql_alpha: 0.1,
            eql_alpha: 0.5,
            iql_tau: 0.9,
            train: TrainParams::default(),
            eval: EvalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SmallDataConfig {
    pub seeds: Vec<u64>,
    /// Names of the discard levels, reported after the undiscarded `vanilla` row.
    pub levels: Vec<String>,
    pub hardness: Vec<f64>,
    pub n_traj: usize,
    pub cap: usize,
    pub expert_epsilon: f64,
    pub algos: Vec<String>,
    pub sql_alpha: f64,
    pub eql_alpha: f64,
    pub iql_tau: f64,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl Default for SmallDataConfig {
    fn default() -> Self {
        SmallDataConfig {
            seeds: default_seeds(),
            levels: vec!["easy".into(), "medium".into(), "hard".into()],
            hardness: vec![0.25, 0.5, 0.75],
            n_traj: 100,
            cap: 20,
            expert_epsilon: 0.1,
            algos: vec!["oos_q".into(), "cql".into(), "sql".into(), "eql".into()],
            sql_alpha: 0.1,
            eql_alpha: 0.5,
            iql_tau: 0.9,
            train: TrainParams {
                steps: 20_000,
                double_q: false,
                ..TrainParams::default()
            },
            eval: EvalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seeds: Vec<u64>,
    pub n_points: usize,
    pub n_bins: usize,
    /// Gaussian noise scale; 0 disables noise.
    pub sigma: f64,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let d = crate::extrema::DemoConfig::default();
        ToyConfig {
            seeds: vec![0],
            n_points: d.n_points,
            n_bins: d.n_bins,
            sigma: 0.25,
            alphas: d.alphas,
            taus: d.taus,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub env: String,
    pub algo: String,
    pub alphas: Vec<f64>,
    pub n_traj: usize,
    pub cap: usize,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: default_seeds(),
            env: "four_rooms".into(),
            algo: "sql".into(),
            alphas: vec![0.1, 0.5, 1.0, 2.0, 10.0],
            n_traj: 30,
            cap: 20,
            train: TrainParams::default(),
            eval: EvalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seeds: Vec<u64>,
    pub env: String,
    pub dataset: Option<PathBuf>,
    pub n_traj: usize,
    pub cap: usize,
    pub algo: String,
    /// Alpha for SQL-family learners, tau for IQL; unset keeps the default.
    pub temperature: Option<f64>,
    /// `tabular` or `coordinate`.
    pub features: String,
    pub checkpoint_every: usize,
    pub train: TrainParams,
    pub eval: EvalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seeds: vec![0],
            env: "four_rooms".into(),
            dataset: None,
            n_traj: 30,
            cap: 20,
            algo: "sql".into(),
            temperature: None,
            features: "tabular".into(),
            checkpoint_every: 1000,
            train: TrainParams::default(),
            eval: EvalParams::default(),
        }
    }
}

/// First 16 hex digits of the SHA-256 of a section's canonical TOML form.
pub fn config_hash<T: Serialize>(command: &str, section: &T) -> Result<String> {
    let text = toml::to_string(section).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::new().chain_update(command.as_bytes()).chain_update(b"\n").chain_update(text.as_bytes()).finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Where a command writes and how it runs its cells.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub exec: Exec,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunContext {
            out_dir: out_dir.into(),
            exec: Exec::default(),
        }
    }
}

/// A cell that did not complete.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub cell: String,
    pub error: String,
}

/// Files written by a command and the cells that failed.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub failed: Vec<FailedCell>,
    /// Cells reused from an earlier run (sweep only).
    pub skipped: usize,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

fn seeds_label(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::Config("seeds must list at least one seed".into()))
    } else {
        Ok(())
    }
}

/// Writes a stamped CSV file and returns its path.
fn write_csv(
    ctx: &RunContext,
    name: &str,
    hash: &str,
    seeds: &[u64],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<PathBuf> {
    fs::create_dir_all(&ctx.out_dir)?;
    let path = ctx.out_dir.join(name);
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash} seed={}", seeds_label(seeds))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(&path, buf)?;
    Ok(path)
}

/// Writes a stamped file whose body comes from `body`.
fn write_stamped(
    ctx: &RunContext,
    name: &str,
    hash: &str,
    seeds: &[u64],
    body: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<PathBuf> {
    fs::create_dir_all(&ctx.out_dir)?;
    let path = ctx.out_dir.join(name);
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash} seed={}", seeds_label(seeds))?;
    body(&mut buf)?;
    fs::write(&path, buf)?;
    Ok(path)
}

fn env_by_name(name: &str) -> Result<GridWorld> {
    match name {
        "four_rooms" => Ok(build_four_rooms()),
        other => Err(Error::Config(format!("unknown env {other:?}"))),
    }
}

fn parse_algos(names: &[String]) -> Result<Vec<Algo>> {
    if names.is_empty() {
        return Err(Error::Config("algos must not be empty".into()));
    }
    names.iter().map(|n| n.parse().map_err(|e: Error| Error::Config(e.to_string()))).collect()
}

/// The MDP whose start distribution is uniform over non-goal cells; data is
/// collected from it, evaluation uses the fixed start.
fn data_mdp(world: &GridWorld) -> Result<TabularMdp> {
    world.mdp.with_initial_dist(world.uniform_start_dist())
}

/// Uniform-behavior dataset from uniform starts.
pub fn uniform_dataset(world: &GridWorld, n_traj: usize, cap: usize, seed: u64) -> Result<OfflineDataset> {
    let mdp = data_mdp(world)?;
    let behavior = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let mut ds = datasets::collect(&mdp, &behavior, n_traj, cap, seed)?;
    ds.meta.policy = "uniform".into();
    ds.meta.goal = Some(world.goal_position());
    ds.meta.minimal = Some(world.minimal_position());
    Ok(ds)
}

/// The optimal greedy policy mixed with `epsilon` uniform exploration.
pub fn expert_policy(world: &GridWorld, epsilon: f64) -> Result<Policy> {
    let vi = crate::mdp::value_iteration(&world.mdp, 1e-12)?;
    let (ns, na) = (world.mdp.n_states(), world.mdp.n_actions());
    let greedy = vi.policy;
    let probs: Vec<f64> = (0..ns)
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| (1.0 - epsilon) * greedy.prob(s, a) + epsilon / na as f64)
        .collect();
    Policy::new(ns, na, probs)
}

/// Expert dataset with at least `min_len` transitions from uniform starts.
pub fn expert_dataset(world: &GridWorld, epsilon: f64, min_len: usize, cap: usize, seed: u64) -> Result<OfflineDataset> {
    let mdp = data_mdp(world)?;
    let pi = expert_policy(world, epsilon)?;
    let mut n_traj = min_len.div_ceil(cap).max(1);
    loop {
        let mut ds = datasets::collect(&mdp, &pi, n_traj, cap, seed)?;
        if ds.len() >= min_len {
            ds.meta.policy = format!("expert:{epsilon}");
            return Ok(ds);
        }
        n_traj *= 2;
    }
}

/// Return anchors for normalized scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchors {
    pub random: f64,
    pub oracle: f64,
}

impl Anchors {
    pub fn of(world: &GridWorld) -> Result<Self> {
        let (ns, na) = (world.mdp.n_states(), world.mdp.n_actions());
        let vi = crate::mdp::value_iteration(&world.mdp, 1e-12)?;
        Ok(Anchors {
            random: policy_return(&world.mdp, &Policy::uniform(ns, na))?,
            oracle: policy_return(&world.mdp, &vi.policy)?,
        })
    }

    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.oracle - self.random)
    }
}

/// Exact discounted return of `pi` from the MDP's start distribution.
pub fn policy_return(mdp: &TabularMdp, pi: &Policy) -> Result<f64> {
    let (v, _) = policy_evaluation(mdp, pi, 1e-12)?;
    Ok(mdp.initial_dist().iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Greedy evaluation of a trained learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Exact discounted return from the start state.
    pub ret: f64,
    pub normalized: f64,
    /// Fraction of rollouts reaching the goal within the step cap.
    pub success: f64,
}

fn evaluate(
    world: &GridWorld,
    anchors: &Anchors,
    state: &LearnerState,
    config: &LearnerConfig,
    dataset: &OfflineDataset,
    eval: &EvalParams,
    seed: u64,
) -> Result<Evaluation> {
    let evaluator = Evaluator {
        mdp: &world.mdp,
        episodes: eval.episodes,
        cap: eval.cap,
        seed,
        greedy: true,
    };
    let pi = evaluator.policy(state, config, dataset);
    let ret = policy_return(&world.mdp, &pi)?;
    let stats = rollout(&world.mdp, &pi, eval.episodes, eval.cap, seed)?;
    Ok(Evaluation {
        ret,
        normalized: anchors.normalize(ret),
        success: stats.success_rate,
    })
}

fn coordinate_features(world: &GridWorld) -> Result<Arc<FeatureMap>> {
    Ok(Arc::new(make_coordinate_features(&world.positions, world.mdp.n_actions())?))
}

fn fmt(x: f64) -> String {
    x.to_string()
}
