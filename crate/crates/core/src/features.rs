//! Sparse feature maps for tabular and linear value functions.
//!
//! A map provides both state features (for `V`) and state-action features
//! (for `Q` and policy logits). Tabular learning is the one-hot case.

use crate::error::{Error, Result};

pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    name: String,
    n_states: usize,
    n_actions: usize,
    state_dim: usize,
    dim: usize,
    state_rows: Vec<SparseRow>,
    sa_rows: Vec<SparseRow>,
}

impl FeatureMap {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Dimension of the state-action features.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn phi(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.sa_rows[s * self.n_actions + a]
    }

    pub fn psi(&self, s: usize) -> &[(usize, f64)] {
        &self.state_rows[s]
    }

    pub fn dense_phi(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, x) in self.phi(s, a) {
            out[i] += x;
        }
        out
    }

    pub fn is_one_hot(&self) -> bool {
        self.name == "one_hot"
    }
}

pub fn dot(row: &[(usize, f64)], w: &[f64]) -> f64 {
    row.iter().map(|&(i, x)| w[i] * x).sum()
}

/// Adds `scale * row` into `grad`.
pub fn axpy(grad: &mut [f64], row: &[(usize, f64)], scale: f64) {
    for &(i, x) in row {
        grad[i] += scale * x;
    }
}

/// One-hot features: `dim = n_states * n_actions`, state dim `n_states`.
pub fn make_one_hot_features(n_states: usize, n_actions: usize) -> FeatureMap {
    FeatureMap {
        name: "one_hot".into(),
        n_states,
        n_actions,
        state_dim: n_states,
        dim: n_states * n_actions,
        state_rows: (0..n_states).map(|s| vec![(s, 1.0)]).collect(),
        sa_rows: (0..n_states * n_actions).map(|i| vec![(i, 1.0)]).collect(),
    }
}

/// Normalized `(x, y)` coordinates and a bias, one copy per action:
/// `phi(s, a) = onehot(a) ⊗ (x, y, 1)`, `dim = 3 n_actions`. State features
/// are `(x, y, 1)`.
pub fn make_coordinate_features(positions: &[(f64, f64)], n_actions: usize) -> Result<FeatureMap> {
    if positions.is_empty() || n_actions == 0 {
        return Err(Error::InvalidArgument("coordinate features need states and actions".into()));
    }
    let span = |sel: fn(&(f64, f64)) -> f64| {
        let lo = positions.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = positions.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = span(|p| p.0);
    let (y0, ys) = span(|p| p.1);
    let norm: Vec<(f64, f64)> = positions.iter().map(|p| ((p.0 - x0) / xs, (p.1 - y0) / ys)).collect();
    let state_rows = norm.iter().map(|&(x, y)| vec![(0, x), (1, y), (2, 1.0)]).collect();
    let mut sa_rows = Vec::with_capacity(positions.len() * n_actions);
    for &(x, y) in &norm {
        for a in 0..n_actions {
            sa_rows.push(vec![(3 * a, x), (3 * a + 1, y), (3 * a + 2, 1.0)]);
        }
    }
    Ok(FeatureMap {
        name: "coordinate".into(),
        n_states: positions.len(),
        n_actions,
        state_dim: 3,
        dim: 3 * n_actions,
        state_rows,
        sa_rows,
    })
}
