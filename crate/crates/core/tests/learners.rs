mod common;

use std::sync::Arc;

use approx::assert_abs_diff_eq;
use common::{max_rel_err, numeric_grad, random_instance, sup};
use ivr_core::datasets::{empirical_model, DatasetMeta, OfflineDataset, Transition};
use ivr_core::exact::{solve_fixed_point, RegularizedModel};
use ivr_core::features::{make_coordinate_features, make_one_hot_features};
use ivr_core::learners::losses::{cql_loss, eql_v_loss, iql_v_loss, q_loss, sql_v_loss, weighted_bc};
use ivr_core::learners::{
    bellman_error, cql_baseline_train, extract_policy, oos_q_train, sparsity_ratio, sql_u_train, train, Algo,
    LearnerConfig,
};
use ivr_core::mdp::{policy_evaluation, value_iteration, Policy};
use ivr_core::regularizers::{make_chi_square, make_reverse_kl};
use ivr_core::rng::substream;
use rand::Rng;

fn full_batch(algo: Algo, alpha: f64, steps: usize, lr: f64) -> LearnerConfig {
    LearnerConfig {
        alpha,
        steps,
        batch_size: 0,
        lr_v: lr,
        lr_q: lr,
        soft_update_lambda: 0.5,
        ..LearnerConfig::for_algo(algo)
    }
    .without_tricks()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = substream(11, "grad");
    let pos: Vec<(f64, f64)> = (0..6).map(|i| ((i % 3) as f64, (i / 3) as f64)).collect();
    let maps = [make_one_hot_features(6, 3), make_coordinate_features(&pos, 3).unwrap()];
    for trial in 0..40 {
        let fm = &maps[trial % 2];
        let batch: Vec<Transition> = (0..16)
            .map(|_| Transition {
                s: rng.random_range(0..6),
                a: rng.random_range(0..3),
                r: rng.random_range(-1.0..1.0),
                s_next: rng.random_range(0..6),
                done: rng.random_bool(0.2),
            })
            .collect();
        let v: Vec<f64> = (0..fm.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..fm.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let per: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
        let h = 1e-6;
        let checks: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (sql_v_loss(&batch, fm, &v, &per, 0.7).1, numeric_grad(|x| sql_v_loss(&batch, fm, x, &per, 0.7).0, &v, h)),
            (
                eql_v_loss(&batch, fm, &v, &per, 0.7, 5.0).1,
                numeric_grad(|x| eql_v_loss(&batch, fm, x, &per, 0.7, 5.0).0, &v, h),
            ),
            (iql_v_loss(&batch, fm, &v, &per, 0.8).1, numeric_grad(|x| iql_v_loss(&batch, fm, x, &per, 0.8).0, &v, h)),
            (q_loss(&batch, fm, &w, &per, 0.9).1, numeric_grad(|x| q_loss(&batch, fm, x, &per, 0.9).0, &w, h)),
            (
                cql_loss(&batch, fm, &w, &per, 0.9, 2.0).1,
                numeric_grad(|x| cql_loss(&batch, fm, x, &per, 0.9, 2.0).0, &w, h),
            ),
            (weighted_bc(&batch, fm, &w, &weights).1, numeric_grad(|x| weighted_bc(&batch, fm, x, &weights).0, &w, h)),
        ];
        for (i, (a, n)) in checks.iter().enumerate() {
            assert!(max_rel_err(a, n) <= 1e-5, "trial {trial} loss {i}: {a:?} vs {n:?}");
        }
    }
}

#[test]
fn eql_full_batch_matches_exact_reverse_kl() {
    let (_, _, ds) = random_instance(1, 5, 3, 0.9, 150);
    let cfg = full_batch(Algo::Eql, 1.0, 6000, 2.0);
    let st = train(&ds, &cfg).unwrap();
    let em = empirical_model(&ds).unwrap();
    let model = RegularizedModel::from_empirical(&em);
    let sol = solve_fixed_point(&model, 1.0, &make_reverse_kl(), 1e-12, 10_000).unwrap();
    assert!(sup(&st.values(), &sol.v) <= 1e-4, "{:?} {:?}", st.values(), sol.v);
    assert!(sup(&st.q_table(), &sol.q) <= 1e-4);
    let pi = extract_policy(&st, &cfg, &ds);
    assert!(sup(pi.probs(), sol.pi.probs()) <= 1e-4);
}

#[test]
fn sql_full_batch_stationarity() {
    let (_, _, ds) = random_instance(2, 5, 3, 0.9, 150);
    let alpha = 0.5;
    let st = train(&ds, &full_batch(Algo::Sql, alpha, 6000, 1.0)).unwrap();
    let em = empirical_model(&ds).unwrap();
    for s in 0..5 {
        let lhs: f64 = (0..3)
            .map(|a| em.mu_row(s)[a] * (1.0 + (st.q_target(s, a) - st.value(s)) / (2.0 * alpha)).max(0.0))
            .sum();
        assert_abs_diff_eq!(lhs, 1.0, epsilon = 1e-4);
    }
}

#[test]
fn iql_median_expectile_is_the_mean() {
    let (_, _, ds) = random_instance(3, 5, 3, 0.9, 150);
    let cfg = LearnerConfig {
        tau: 0.5,
        ..full_batch(Algo::Iql, 1.0, 6000, 1.0)
    };
    let st = train(&ds, &cfg).unwrap();
    let em = empirical_model(&ds).unwrap();
    for s in 0..5 {
        let mean: f64 = (0..3).map(|a| em.mu_row(s)[a] * st.q_target(s, a)).sum();
        assert_abs_diff_eq!(st.value(s), mean, epsilon = 1e-6);
    }
}

#[test]
fn sql_u_matches_exact_chi_square() {
    let (_, _, ds) = random_instance(4, 5, 3, 0.9, 150);
    let alpha = 0.5;
    let tables = sql_u_train(&ds, &full_batch(Algo::SqlU, alpha, 8000, 1.0)).unwrap();
    let em = empirical_model(&ds).unwrap();
    let sol = solve_fixed_point(&RegularizedModel::from_empirical(&em), alpha, &make_chi_square(), 1e-12, 10_000).unwrap();
    assert!(sup(&tables.u, &sol.u) <= 1e-4, "{:?} {:?}", tables.u, sol.u);
    assert!(sup(&tables.v, &sol.v) <= 1e-4);
}

fn single_action_dataset(gamma: f64) -> OfflineDataset {
    // two states, one action, deterministic swaps with rewards 1 and 2
    let mut ds = OfflineDataset::new(2, 1, gamma, DatasetMeta::default());
    for _ in 0..5 {
        ds.transitions.push(Transition { s: 0, a: 0, r: 1.0, s_next: 1, done: false });
        ds.transitions.push(Transition { s: 1, a: 0, r: 2.0, s_next: 0, done: false });
    }
    ds
}

#[test]
fn sql_u_trivial_cases() {
    let ds = single_action_dataset(0.5);
    let t = sql_u_train(&ds, &full_batch(Algo::SqlU, 0.3, 4000, 0.2)).unwrap();
    for s in 0..2 {
        assert_abs_diff_eq!(t.u[s], t.q[s] - 0.3, epsilon = 1e-8);
    }
    let myopic = single_action_dataset(0.0);
    let cfg = LearnerConfig {
        // each entry holds half the batch, so lr 1 lands on the target
        soft_update_lambda: 1.0,
        ..full_batch(Algo::SqlU, 0.3, 1, 1.0)
    };
    let t = sql_u_train(&myopic, &cfg).unwrap();
    assert_eq!(t.q, vec![1.0, 2.0]);
}

#[test]
fn lambda_one_copies_online_critic() {
    let (_, _, ds) = random_instance(5, 4, 2, 0.9, 20);
    let cfg = LearnerConfig {
        soft_update_lambda: 1.0,
        steps: 17,
        batch_size: 8,
        ..LearnerConfig::for_algo(Algo::Sql)
    };
    let st = train(&ds, &cfg).unwrap();
    assert_eq!(st.q1, st.q1_target);
}

#[test]
fn extraction_rules() {
    let fm = Arc::new(make_one_hot_features(2, 2));
    let mut ds = OfflineDataset::new(2, 2, 0.9, DatasetMeta::default());
    let t = |s, a| Transition { s, a, r: 0.0, s_next: s, done: false };
    ds.transitions = vec![t(0, 0), t(0, 1), t(1, 0), t(1, 0), t(1, 1)];
    let cfg = LearnerConfig { steps: 1, ..LearnerConfig::for_algo(Algo::Eql) };
    let mut st = train(&ds, &LearnerConfig { steps: 1, ..cfg.clone() }).unwrap();
    st.v = vec![0.0, 0.0];
    st.q1_target = vec![1.0, 0.0, 0.3, 0.3];
    let eql = LearnerConfig { alpha: 1.0, ..cfg.clone() };
    let pi = extract_policy(&st, &eql, &ds);
    let e10 = 10f64.exp();
    assert_abs_diff_eq!(pi.prob(0, 0), e10 / (e10 + 1.0), epsilon = 1e-12);
    // equal weights clone the behavior
    assert_abs_diff_eq!(pi.prob(1, 0), 2.0 / 3.0, epsilon = 1e-12);

    let sql = LearnerConfig { algo: Algo::Sql, ..cfg };
    st.algo = Algo::Sql;
    let pi = extract_policy(&st, &sql, &ds);
    assert_eq!(pi.row(0), &[1.0, 0.0]);
    // equal positive advantages clone the behavior
    assert_abs_diff_eq!(pi.prob(1, 0), 2.0 / 3.0, epsilon = 1e-12);
    assert_eq!(fm.dim(), 4);
}

#[test]
fn sparsity_ratio_examples() {
    let mut ds = OfflineDataset::new(1, 2, 0.9, DatasetMeta::default());
    ds.transitions = vec![
        Transition { s: 0, a: 0, r: 0.0, s_next: 0, done: false },
        Transition { s: 0, a: 1, r: 0.0, s_next: 0, done: false },
    ];
    let mut st = train(&ds, &LearnerConfig { steps: 1, ..Default::default() }).unwrap();
    st.v = vec![0.0];
    st.q1_target = vec![-3.0, 1.0];
    assert_eq!(sparsity_ratio(&st, &ds, 1.0), 0.5);
    assert_eq!(sparsity_ratio(&st, &ds, 1e9), 1.0);
}

#[test]
fn bellman_error_examples() {
    let g = ivr_core::mdp::build_four_rooms();
    let all: Vec<Transition> = (0..g.mdp.n_states())
        .filter(|&s| !g.mdp.is_terminal(s))
        .flat_map(|s| (0..4).map(move |a| (s, a)))
        .map(|(s, a)| {
            let s_next = g.mdp.next_dist(s, a).iter().position(|&p| p == 1.0).unwrap();
            Transition { s, a, r: g.mdp.reward(s, a), s_next, done: g.mdp.is_terminal(s_next) }
        })
        .collect();
    let mut ds = OfflineDataset::new(104, 4, 0.9, DatasetMeta::default());
    ds.transitions = all;
    let pi = Policy::uniform(104, 4);
    let (_, q) = policy_evaluation(&g.mdp, &pi, 1e-14).unwrap();
    let mut st = train(&ds, &LearnerConfig { steps: 1, ..Default::default() }).unwrap();
    st.q1 = q;
    assert!(bellman_error(&st, &ds, &pi) <= 1e-10);
    st.q1 = vec![0.0; 416];
    let mean_sq = ds.transitions.iter().map(|t| t.r * t.r).sum::<f64>() / ds.len() as f64;
    assert_abs_diff_eq!(bellman_error(&st, &ds, &pi), mean_sq, epsilon = 1e-12);

    // Q-learning on full coverage recovers Q*
    let cfg = LearnerConfig { steps: 3000, batch_size: 0, lr_q: 20.0, soft_update_lambda: 1.0, ..Default::default() };
    let st = oos_q_train(&ds, &cfg).unwrap();
    let vi = value_iteration(&g.mdp, 1e-12).unwrap();
    let live: Vec<f64> = (0..104).filter(|&s| !g.mdp.is_terminal(s)).flat_map(|s| (0..4).map(move |a| (s, a))).map(|(s, a)| st.q(s, a) - vi.q[s * 4 + a]).collect();
    assert!(live.iter().all(|d| d.abs() < 1e-6), "{:?}", live.iter().cloned().fold(0.0, |m: f64, d| m.max(d.abs())));
}

#[test]
fn cql_weight_controls_support() {
    let (_, mu, ds) = random_instance(6, 8, 3, 0.9, 10);
    let base = LearnerConfig { steps: 2000, batch_size: 0, lr_q: 0.5, ..Default::default() };
    let zero = cql_baseline_train(&ds, &LearnerConfig { cql_weight: 0.0, ..base.clone() }).unwrap();
    let oos = oos_q_train(&ds, &base).unwrap();
    assert_eq!(zero.q1, oos.q1);

    let strong = cql_baseline_train(&ds, &LearnerConfig { cql_weight: 50.0, ..base.clone() }).unwrap();
    let em = empirical_model(&ds).unwrap();
    let pi = extract_policy(&strong, &LearnerConfig { algo: Algo::Cql, ..base }, &ds);
    let visited: Vec<usize> = (0..8).filter(|&s| em.visited(s)).collect();
    let on_support = visited
        .iter()
        .filter(|&&s| (0..3).any(|a| pi.prob(s, a) == 1.0 && em.support[s * 3 + a]))
        .count();
    assert!(on_support as f64 >= 0.9 * visited.len() as f64);
    assert_eq!(mu.n_states(), 8);
}

#[test]
fn training_is_deterministic() {
    let (_, _, ds) = random_instance(7, 6, 3, 0.9, 30);
    for algo in Algo::ALL {
        let cfg = LearnerConfig { steps: 300, batch_size: 32, checkpoint_every: 100, double_q: true, seed: 4, ..LearnerConfig::for_algo(algo) };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        let rec = |s: &ivr_core::learners::LearnerState| s.metrics.iter().map(|m| m.record()).collect::<Vec<_>>();
        assert_eq!(rec(&a), rec(&b), "{algo}");
        assert_eq!(a.metrics.len(), 3);
        assert_eq!(a.q1, b.q1);
    }
}

#[test]
fn divergence_is_reported_with_step() {
    let (_, _, ds) = random_instance(8, 4, 2, 0.99, 20);
    let cfg = LearnerConfig { steps: 500, batch_size: 0, lr_q: 1e6, lr_v: 1e6, ..LearnerConfig::for_algo(Algo::Iql) };
    match train(&ds, &cfg) {
        Err(ivr_core::Error::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|s| s.step)),
    }
}
