use std::collections::BTreeMap;
use std::fs;

use crate::datasets::{self, empirical_model, OfflineDataset};
use crate::error::{Error, Result};
use crate::exact::{kkt_residual, solve_fixed_point_with, RegularizedModel};
use crate::extrema::{sine_demo, write_demo_csv, DemoConfig, NoiseSpec};
use crate::learners::{
    bellman_error, extract_policy, sparsity_ratio, train, train_with_eval, Algo, Evaluator, METRICS_HEADER,
};
use crate::mdp::{value_iteration, GridWorld, Policy};
use crate::par;
use crate::regularizers::Regularizer;

use super::*;

fn check_alpha(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn check_tau(v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie in (0, 1), got {v}")))
    }
}

/// Runs `f` over every cell and splits successes from failures, keeping
/// cell order.
fn run_cells<C, T, F>(cells: &[C], exec: Exec, label: impl Fn(&C) -> String, f: F) -> (Vec<T>, Vec<FailedCell>)
where
    C: Sync,
    T: Send,
    F: Fn(&C) -> Result<T> + Sync + Send,
{
    let results = par::map_slice(cells, exec, |c| f(c));
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (c, r) in cells.iter().zip(results) {
        match r {
            Ok(t) => ok.push(t),
            Err(e) => failed.push(FailedCell {
                cell: label(c),
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

fn temperature_for(algo: Algo, sql_alpha: f64, eql_alpha: f64, iql_tau: f64) -> Option<f64> {
    match algo {
        Algo::Sql | Algo::SqlU => Some(sql_alpha),
        Algo::Eql => Some(eql_alpha),
        Algo::Iql => Some(iql_tau),
        Algo::Cql | Algo::OosQ => None,
    }
}

fn visited_mask(dataset: &OfflineDataset) -> Vec<bool> {
    let mut m = vec![false; dataset.n_states];
    dataset.transitions.iter().for_each(|t| m[t.s] = true);
    m
}

fn load_or_collect(world: &GridWorld, path: Option<&std::path::Path>, n_traj: usize, cap: usize, seed: u64) -> Result<OfflineDataset> {
    match path {
        Some(p) => {
            let loaded = datasets::load(p)?;
            if let Some(w) = loaded.warning {
                log::warn!("{}: {w}", p.display());
            }
            let ds = loaded.dataset;
            if ds.n_states != world.mdp.n_states() || ds.n_actions != world.mdp.n_actions() {
                return Err(Error::Config(format!("{} does not match the environment shape", p.display())));
            }
            Ok(ds)
        }
        None => uniform_dataset(world, n_traj, cap, seed),
    }
}

/// Solves the regularized problem exactly and writes `solve_states`,
/// `solve_actions` and `solve_kkt` CSVs per seed.
pub fn cmd_solve(cfg: &SolveConfig, ctx: &RunContext) -> Result<Report> {
    require_seeds(&cfg.seeds)?;
    check_alpha("alpha", cfg.alpha)?;
    let reg = Regularizer::from_name(&cfg.regularizer).map_err(|e| Error::Config(e.to_string()))?;
    let world = env_by_name(&cfg.env)?;
    let hash = config_hash("solve", cfg)?;
    let mut report = Report::default();
    for &seed in &cfg.seeds {
        let model = match cfg.model.as_str() {
            "empirical" => {
                let ds = load_or_collect(&world, cfg.dataset.as_deref(), cfg.n_traj, cfg.cap, seed)?;
                RegularizedModel::from_empirical(&empirical_model(&ds)?)
            }
            "uniform" => {
                let (ns, na) = (world.mdp.n_states(), world.mdp.n_actions());
                RegularizedModel::from_mdp(&world.mdp, &Policy::uniform(ns, na))?
            }
            other => return Err(Error::Config(format!("unknown model {other:?}"))),
        };
        let sol = solve_fixed_point_with(&model, cfg.alpha, &reg, cfg.tol, cfg.max_iter, ctx.exec)?;
        let kkt = kkt_residual(&sol, &model, cfg.alpha, &reg);
        let seeds = [seed];
        report.files.push(write_stamped(ctx, &format!("solve_states_seed{seed}.csv"), &hash, &seeds, |b| {
            sol.write_states_csv(b)
        })?);
        report.files.push(write_stamped(ctx, &format!("solve_actions_seed{seed}.csv"), &hash, &seeds, |b| {
            sol.write_actions_csv(b)
        })?);
        report.files.push(write_csv(
            ctx,
            &format!("solve_kkt_seed{seed}.csv"),
            &hash,
            &seeds,
            &["stationarity", "complementary", "dual_infeasibility", "normalization", "support", "max", "iterations"],
            &[vec![
                fmt(kkt.stationarity),
                fmt(kkt.complementary),
                fmt(kkt.dual_infeasibility),
                fmt(kkt.normalization),
                fmt(kkt.support),
                fmt(kkt.max()),
                sol.iterations.to_string(),
            ]],
        )?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourRoomsRow {
    pub seed: u64,
    pub algo: Algo,
    pub temperature: f64,
    pub transitions: usize,
    pub visited_states: usize,
    pub reward_hits: usize,
    pub success: f64,
    pub ret: f64,
    pub normalized: f64,
    /// `max |V - V*|` over states visited by the dataset.
    pub value_error: f64,
}

impl FourRoomsRow {
    const HEADER: [&'static str; 10] = [
        "seed",
        "algo",
        "temperature",
        "transitions",
        "visited_states",
        "reward_hits",
        "success",
        "return",
        "normalized_return",
        "value_error",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.algo.to_string(),
            fmt(self.temperature),
            self.transitions.to_string(),
            self.visited_states.to_string(),
            self.reward_hits.to_string(),
            fmt(self.success),
            fmt(self.ret),
            fmt(self.normalized),
            fmt(self.value_error),
        ]
    }
}

/// SQL, EQL and IQL on uniform-behavior Four Rooms data; writes `fourrooms.csv`.
pub fn cmd_fourrooms(cfg: &FourRoomsConfig, ctx: &RunContext) -> Result<(Report, Vec<FourRoomsRow>)> {
    require_seeds(&cfg.seeds)?;
    check_alpha("sql_alpha", cfg.sql_alpha)?;
    check_alpha("eql_alpha", cfg.eql_alpha)?;
    check_tau(cfg.iql_tau)?;
    let world = build_four_rooms();
    let anchors = Anchors::of(&world)?;
    let v_star = value_iteration(&world.mdp, 1e-12)?.v;
    let hash = config_hash("fourrooms", cfg)?;
    let data: Vec<OfflineDataset> = cfg
        .seeds
        .iter()
        .map(|&s| uniform_dataset(&world, cfg.n_traj, cfg.cap, s))
        .collect::<Result<_>>()?;
    let algos = [(Algo::Sql, cfg.sql_alpha), (Algo::Eql, cfg.eql_alpha), (Algo::Iql, cfg.iql_tau)];
    let cells: Vec<(usize, Algo, f64)> = (0..cfg.seeds.len())
        .flat_map(|i| algos.iter().map(move |&(a, t)| (i, a, t)))
        .collect();
    let (rows, failed) = run_cells(
        &cells,
        ctx.exec,
        |&(i, a, _)| format!("seed={} algo={a}", cfg.seeds[i]),
        |&(i, algo, temp)| {
            let (seed, ds) = (cfg.seeds[i], &data[i]);
            let lc = cfg.train.learner(algo, Some(temp), None, seed);
            let st = train(ds, &lc)?;
            let ev = evaluate(&world, &anchors, &st, &lc, ds, &cfg.eval, seed)?;
            let visited = visited_mask(ds);
            let value_error = (0..ds.n_states)
                .filter(|&s| visited[s])
                .map(|s| (st.value(s) - v_star[s]).abs())
                .fold(0.0, f64::max);
            Ok(FourRoomsRow {
                seed,
                algo,
                temperature: temp,
                transitions: ds.len(),
                visited_states: visited.iter().filter(|&&b| b).count(),
                reward_hits: ds.reward_hits(),
                success: ev.success,
                ret: ev.ret,
                normalized: ev.normalized,
                value_error,
            })
        },
    );
    let records: Vec<Vec<String>> = rows.iter().map(FourRoomsRow::record).collect();
    let file = write_csv(ctx, "fourrooms.csv", &hash, &cfg.seeds, &FourRoomsRow::HEADER, &records)?;
    Ok((
        Report {
            files: vec![file],
            failed,
            skipped: 0,
        },
        rows,
    ))
}

/// Uniform-behavior dataset with at least `min_len` transitions.
fn uniform_dataset_of_size(world: &GridWorld, min_len: usize, cap: usize, seed: u64) -> Result<OfflineDataset> {
    let mut n_traj = min_len.div_ceil(cap).max(1);
    loop {
        let ds = uniform_dataset(world, n_traj, cap, seed)?;
        if ds.len() >= min_len {
            return Ok(ds);
        }
        n_traj *= 2;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRow {
    pub seed: u64,
    pub ratio: f64,
    pub algo: Algo,
    pub temperature: f64,
    pub expert_transitions: usize,
    pub success: f64,
    pub ret: f64,
    pub normalized: f64,
}

impl NoisyRow {
    const HEADER: [&'static str; 8] = [
        "seed",
        "expert_ratio",
        "algo",
        "temperature",
        "expert_transitions",
        "success",
        "return",
        "normalized_return",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            fmt(self.ratio),
            self.algo.to_string(),
            fmt(self.temperature),
            self.expert_transitions.to_string(),
            fmt(self.success),
            fmt(self.ret),
            fmt(self.normalized),
        ]
    }
}

/// Expert/random mixtures at each expert ratio; writes `noisy.csv`.
pub fn cmd_noisy(cfg: &NoisyConfig, ctx: &RunContext) -> Result<(Report, Vec<NoisyRow>)> {
    require_seeds(&cfg.seeds)?;
    if cfg.ratios.is_empty() {
        return Err(Error::Config("ratios must not be empty".into()));
    }
    if let Some(r) = cfg.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("ratio {r} is outside [0, 1]")));
    }
    if cfg.total == 0 {
        return Err(Error::Config("total must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.expert_epsilon) {
        return Err(Error::Config("expert_epsilon must lie in [0, 1]".into()));
    }
    check_alpha("sql_alpha", cfg.sql_alpha)?;
    check_alpha("eql_alpha", cfg.eql_alpha)?;
    check_tau(cfg.iql_tau)?;
    let algos = parse_algos(&cfg.algos)?;
    let world = build_four_rooms();
    let anchors = Anchors::of(&world)?;
    let hash = config_hash("noisy", cfg)?;
    let sources: Vec<(OfflineDataset, OfflineDataset)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            Ok((
                expert_dataset(&world, cfg.expert_epsilon, cfg.total, cfg.cap, s)?,
                uniform_dataset_of_size(&world, cfg.total, cfg.cap, s)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut mixes = BTreeMap::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        for (j, &ratio) in cfg.ratios.iter().enumerate() {
            let (expert, random) = &sources[i];
            mixes.insert((i, j), datasets::mix(expert, random, ratio, cfg.total, seed)?);
        }
    }
    let cells: Vec<(usize, usize, Algo)> = mixes
        .keys()
        .flat_map(|&(i, j)| algos.iter().map(move |&a| (i, j, a)))
        .collect();
    let (rows, failed) = run_cells(
        &cells,
        ctx.exec,
        |&(i, j, a)| format!("seed={} ratio={} algo={a}", cfg.seeds[i], cfg.ratios[j]),
        |&(i, j, algo)| {
            let (seed, ratio, ds) = (cfg.seeds[i], cfg.ratios[j], &mixes[&(i, j)]);
            let temp = temperature_for(algo, cfg.sql_alpha, cfg.eql_alpha, cfg.iql_tau);
            let lc = cfg.train.learner(algo, temp, None, seed);
            let st = train(ds, &lc)?;
            let ev = evaluate(&world, &anchors, &st, &lc, ds, &cfg.eval, seed)?;
            Ok(NoisyRow {
                seed,
                ratio,
                algo,
                temperature: temp.unwrap_or(f64::NAN),
                expert_transitions: datasets::round_half_up(ratio * cfg.total as f64).min(cfg.total),
                success: ev.success,
                ret: ev.ret,
                normalized: ev.normalized,
            })
        },
    );
    let records: Vec<Vec<String>> = rows.iter().map(NoisyRow::record).collect();
    let file = write_csv(ctx, "noisy.csv", &hash, &cfg.seeds, &NoisyRow::HEADER, &records)?;
    Ok((
        Report {
            files: vec![file],
            failed,
            skipped: 0,
        },
        rows,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallDataRow {
    pub seed: u64,
    pub level: String,
    pub hardness: f64,
    pub kept: usize,
    pub algo: Algo,
    pub temperature: f64,
    pub success: f64,
    pub normalized: f64,
    pub bellman_error: f64,
}

impl SmallDataRow {
    const HEADER: [&'static str; 9] = [
        "seed",
        "level",
        "hardness",
        "kept_transitions",
        "algo",
        "temperature",
        "success",
        "normalized_return",
        "bellman_error",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.level.clone(),
            fmt(self.hardness),
            self.kept.to_string(),
            self.algo.to_string(),
            fmt(self.temperature),
            fmt(self.success),
            fmt(self.normalized),
            fmt(self.bellman_error),
        ]
    }
}

/// The base dataset for the small-data regime: expert trajectories from
/// uniform starts.
pub fn small_data_base(world: &GridWorld, n_traj: usize, cap: usize, epsilon: f64, seed: u64) -> Result<OfflineDataset> {
    let mdp = world.mdp.with_initial_dist(world.uniform_start_dist())?;
    let pi = expert_policy(world, epsilon)?;
    let mut ds = datasets::collect(&mdp, &pi, n_traj, cap, seed)?;
    ds.meta.policy = format!("expert:{epsilon}");
    ds.meta.goal = Some(world.goal_position());
    ds.meta.minimal = Some(world.minimal_position());
    Ok(ds)
}

/// Distance-based discarding at each hardness level with coordinate
/// features; writes `smalldata.csv`.
pub fn cmd_smalldata(cfg: &SmallDataConfig, ctx: &RunContext) -> Result<(Report, Vec<SmallDataRow>)> {
    require_seeds(&cfg.seeds)?;
    if cfg.levels.len() != cfg.hardness.len() {
        return Err(Error::Config("levels and hardness must have the same length".into()));
    }
    if let Some(h) = cfg.hardness.iter().find(|h| !(**h >= 0.0)) {
        return Err(Error::Config(format!("hardness must be >= 0, got {h}")));
    }
    check_alpha("sql_alpha", cfg.sql_alpha)?;
    check_alpha("eql_alpha", cfg.eql_alpha)?;
    check_tau(cfg.iql_tau)?;
    let algos = parse_algos(&cfg.algos)?;
    if algos.contains(&Algo::SqlU) {
        return Err(Error::Config("sql_u supports the tabular parametrization only".into()));
    }
    let world = build_four_rooms();
    let anchors = Anchors::of(&world)?;
    let features = coordinate_features(&world)?;
    let hash = config_hash("smalldata", cfg)?;

    let mut levels: Vec<(String, f64)> = vec![("vanilla".into(), 0.0)];
    levels.extend(cfg.levels.iter().cloned().zip(cfg.hardness.iter().copied()));
    let mut data = BTreeMap::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let base = small_data_base(&world, cfg.n_traj, cfg.cap, cfg.expert_epsilon, seed)?;
        for (j, (_, h)) in levels.iter().enumerate() {
            let ds = if j == 0 {
                base.clone()
            } else {
                datasets::distance_discard(
                    &base,
                    &world.positions,
                    world.goal_position(),
                    world.minimal_position(),
                    *h,
                    seed,
                )?
            };
            data.insert((i, j), ds);
        }
    }
    let cells: Vec<(usize, usize, Algo)> = data
        .keys()
        .flat_map(|&(i, j)| algos.iter().map(move |&a| (i, j, a)))
        .collect();
    let (rows, failed) = run_cells(
        &cells,
        ctx.exec,
        |&(i, j, a)| format!("seed={} level={} algo={a}", cfg.seeds[i], levels[j].0),
        |&(i, j, algo)| {
            let (seed, ds) = (cfg.seeds[i], &data[&(i, j)]);
            let temp = temperature_for(algo, cfg.sql_alpha, cfg.eql_alpha, cfg.iql_tau);
            let lc = cfg.train.learner(algo, temp, Some(Arc::clone(&features)), seed);
            let st = train(ds, &lc)?;
            let ev = evaluate(&world, &anchors, &st, &lc, ds, &cfg.eval, seed)?;
            let pi = extract_policy(&st, &lc, ds);
            Ok(SmallDataRow {
                seed,
                level: levels[j].0.clone(),
                hardness: levels[j].1,
                kept: ds.len(),
                algo,
                temperature: temp.unwrap_or(f64::NAN),
                success: ev.success,
                normalized: ev.normalized,
                bellman_error: bellman_error(&st, ds, &pi),
            })
        },
    );
    let records: Vec<Vec<String>> = rows.iter().map(SmallDataRow::record).collect();
    let file = write_csv(ctx, "smalldata.csv", &hash, &cfg.seeds, &SmallDataRow::HEADER, &records)?;
    Ok((
        Report {
            files: vec![file],
            failed,
            skipped: 0,
        },
        rows,
    ))
}

/// Noisy-sine extrema demo; writes `toy_seed<seed>.csv`.
pub fn cmd_toy(cfg: &ToyConfig, ctx: &RunContext) -> Result<Report> {
    require_seeds(&cfg.seeds)?;
    if !(cfg.sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be >= 0, got {}", cfg.sigma)));
    }
    for &a in &cfg.alphas {
        check_alpha("alpha", a)?;
    }
    for &t in &cfg.taus {
        check_tau(t)?;
    }
    let hash = config_hash("toy", cfg)?;
    let mut report = Report::default();
    for &seed in &cfg.seeds {
        let demo = DemoConfig {
            n_points: cfg.n_points,
            n_bins: cfg.n_bins,
            noise: if cfg.sigma > 0.0 {
                NoiseSpec::Gaussian { sigma: cfg.sigma }
            } else {
                NoiseSpec::None
            },
            alphas: cfg.alphas.clone(),
            taus: cfg.taus.clone(),
            seed,
        };
        let rows = sine_demo(&demo).map_err(|e| Error::Config(e.to_string()))?;
        report
            .files
            .push(write_stamped(ctx, &format!("toy_seed{seed}.csv"), &hash, &[seed], |b| write_demo_csv(&rows, b))?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub env: String,
    pub algo: Algo,
    pub alpha: f64,
    pub seed: u64,
    pub cell: String,
    pub normalized: f64,
    pub success: f64,
    pub sparsity_ratio: f64,
}

impl SweepRow {
    const HEADER: [&'static str; 8] = [
        "env",
        "algo",
        "alpha",
        "seed",
        "cell",
        "normalized_return",
        "success",
        "sparsity_ratio",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.env.clone(),
            self.algo.to_string(),
            fmt(self.alpha),
            self.seed.to_string(),
            self.cell.clone(),
            fmt(self.normalized),
            fmt(self.success),
            fmt(self.sparsity_ratio),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Option<Self> {
        if rec.len() != Self::HEADER.len() {
            return None;
        }
        Some(SweepRow {
            env: rec[0].to_string(),
            algo: rec[1].parse().ok()?,
            alpha: rec[2].parse().ok()?,
            seed: rec[3].parse().ok()?,
            cell: rec[4].to_string(),
            normalized: rec[5].parse().ok()?,
            success: rec[6].parse().ok()?,
            sparsity_ratio: rec[7].parse().ok()?,
        })
    }
}

/// Identifies one sweep cell by the hash of the config narrowed to it.
fn sweep_cell_key(cfg: &SweepConfig, alpha: f64, seed: u64) -> Result<String> {
    let cell = SweepConfig {
        seeds: vec![seed],
        alphas: vec![alpha],
        ..cfg.clone()
    };
    config_hash("sweep-cell", &cell)
}

fn read_sweep_rows(path: &std::path::Path) -> BTreeMap<String, SweepRow> {
    let Ok(text) = fs::read_to_string(path) else {
        return BTreeMap::new();
    };
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    reader
        .records()
        .filter_map(|r| r.ok().as_ref().and_then(SweepRow::parse))
        .map(|r| (r.cell.clone(), r))
        .collect()
}

/// Temperature sweep reporting score and non-sparsity ratio per cell;
/// writes `sweep.csv`. Cells already present in an existing `sweep.csv`
/// (matched by cell key) are reused, and the file is rewritten in grid order.
pub fn cmd_sweep(cfg: &SweepConfig, ctx: &RunContext) -> Result<(Report, Vec<SweepRow>)> {
    require_seeds(&cfg.seeds)?;
    if cfg.alphas.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    for &a in &cfg.alphas {
        check_alpha("alpha", a)?;
    }
    let algo: Algo = cfg.algo.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    if !matches!(algo, Algo::Sql | Algo::Eql) {
        return Err(Error::Config("sweep supports sql and eql".into()));
    }
    let world = env_by_name(&cfg.env)?;
    let anchors = Anchors::of(&world)?;
    let hash = config_hash("sweep", cfg)?;
    let existing = read_sweep_rows(&ctx.out_dir.join("sweep.csv"));

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &alpha in &cfg.alphas {
            cells.push((seed, alpha, sweep_cell_key(cfg, alpha, seed)?));
        }
    }
    let todo: Vec<&(u64, f64, String)> = cells.iter().filter(|c| !existing.contains_key(&c.2)).collect();
    let seeds_needed: Vec<u64> = {
        let mut s: Vec<u64> = todo.iter().map(|c| c.0).collect();
        s.dedup();
        s
    };
    let data: BTreeMap<u64, OfflineDataset> = seeds_needed
        .iter()
        .map(|&s| Ok((s, uniform_dataset(&world, cfg.n_traj, cfg.cap, s)?)))
        .collect::<Result<_>>()?;
    let (fresh, failed) = run_cells(
        &todo,
        ctx.exec,
        |c| format!("seed={} alpha={}", c.0, c.1),
        |&&(seed, alpha, ref key)| {
            let ds = &data[&seed];
            let lc = cfg.train.learner(algo, Some(alpha), None, seed);
            let st = train(ds, &lc)?;
            let ev = evaluate(&world, &anchors, &st, &lc, ds, &cfg.eval, seed)?;
            Ok(SweepRow {
                env: cfg.env.clone(),
                algo,
                alpha,
                seed,
                cell: key.clone(),
                normalized: ev.normalized,
                success: ev.success,
                sparsity_ratio: sparsity_ratio(&st, ds, alpha),
            })
        },
    );
    let mut by_key: BTreeMap<String, SweepRow> = fresh.into_iter().map(|r| (r.cell.clone(), r)).collect();
    let rows: Vec<SweepRow> = cells
        .iter()
        .filter_map(|c| by_key.remove(&c.2).or_else(|| existing.get(&c.2).cloned()))
        .collect();
    let records: Vec<Vec<String>> = rows.iter().map(SweepRow::record).collect();
    let file = write_csv(ctx, "sweep.csv", &hash, &cfg.seeds, &SweepRow::HEADER, &records)?;
    Ok((
        Report {
            files: vec![file],
            failed,
            skipped: cells.len() - todo.len(),
        },
        rows,
    ))
}

/// One training run per seed with its metrics trace; writes
/// `train_<algo>_seed<seed>.csv`.
pub fn cmd_train(cfg: &TrainConfig, ctx: &RunContext) -> Result<Report> {
    require_seeds(&cfg.seeds)?;
    let algo: Algo = cfg.algo.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let world = env_by_name(&cfg.env)?;
    let features = match cfg.features.as_str() {
        "tabular" => None,
        "coordinate" => Some(coordinate_features(&world)?),
        other => return Err(Error::Config(format!("unknown features {other:?}"))),
    };
    let hash = config_hash("train", cfg)?;
    let data: Vec<OfflineDataset> = cfg
        .seeds
        .iter()
        .map(|&s| load_or_collect(&world, cfg.dataset.as_deref(), cfg.n_traj, cfg.cap, s))
        .collect::<Result<_>>()?;
    let idx: Vec<usize> = (0..cfg.seeds.len()).collect();
    let (traces, failed) = run_cells(
        &idx,
        ctx.exec,
        |&i| format!("seed={}", cfg.seeds[i]),
        |&i| {
            let seed = cfg.seeds[i];
            let mut lc = cfg.train.learner(algo, cfg.temperature, features.clone(), seed);
            lc.checkpoint_every = cfg.checkpoint_every;
            lc.validate()?;
            let ev = Evaluator {
                mdp: &world.mdp,
                episodes: cfg.eval.episodes,
                cap: cfg.eval.cap,
                seed,
                greedy: true,
            };
            let st = train_with_eval(&data[i], &lc, Some(&ev))?;
            Ok((seed, st.metrics))
        },
    );
    let mut report = Report {
        failed,
        ..Report::default()
    };
    for (seed, metrics) in traces {
        let rows: Vec<Vec<String>> = metrics.iter().map(|m| m.record().to_vec()).collect();
        report.files.push(write_csv(
            ctx,
            &format!("train_{algo}_seed{seed}.csv"),
            &hash,
            &[seed],
            &METRICS_HEADER,
            &rows,
        )?);
    }
    Ok(report)
}
