#![allow(dead_code)]

use ivr_core::datasets::{collect, OfflineDataset};
use ivr_core::mdp::{random_mdp, random_policy, Policy, TabularMdp};
use ivr_core::rng::substream;

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between two gradients, with an absolute floor.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// A random MDP, a full-support behavior policy and a dataset collected
/// from uniform starts.
pub fn random_instance(seed: u64, ns: usize, na: usize, gamma: f64, n_traj: usize) -> (TabularMdp, Policy, OfflineDataset) {
    let mut rng = substream(seed, "instance");
    let mdp = random_mdp(ns, na, gamma, 3, &mut rng).unwrap();
    let mu = random_policy(ns, na, 0.3, &mut rng);
    let ds = collect(&mdp, &mu, n_traj, 20, seed).unwrap();
    (mdp, mu, ds)
}

pub fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
