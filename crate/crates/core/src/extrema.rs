//! Scalar location fits that interpolate between the mean and the maximum of
//! a sample, and the noisy-sine demo built on them.
//!
//! - `fit_m_sql`: root of `E[max(1 + (x - m)/(2 alpha), 0)] = 1`
//! - `fit_m_eql`: `alpha log E[exp(x / alpha)]`
//! - `fit_m_expectile`: the `tau`-expectile
//!
//! All three equal the mean at one end of their temperature range and
//! approach the maximum at the other.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;

const ROOT_TOL: f64 = 1e-12;
const GD_MAX_ITER: usize = 1_000_000;

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("sample set is empty".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("samples must be finite".into()));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

fn min_max(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Bisection for the root of a nonincreasing function on `[lo, hi]`.
fn bisect_decreasing(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= ROOT_TOL * mid.abs().max(1.0) {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn sql_lhs(samples: &[f64], alpha: f64, m: f64) -> f64 {
    samples
        .iter()
        .map(|x| (1.0 + (x - m) / (2.0 * alpha)).max(0.0))
        .sum::<f64>()
        / samples.len() as f64
}

/// Minimizer of `E[1(z > 0) z^2 + m/alpha]`, `z = 1 + (x - m)/(2 alpha)`.
pub fn fit_m_sql(samples: &[f64], alpha: f64) -> Result<f64> {
    check_samples(samples)?;
    check_positive("alpha", alpha)?;
    let (lo, hi) = min_max(samples);
    Ok(bisect_decreasing(lo - 2.0 * alpha, hi + 2.0 * alpha, |m| {
        sql_lhs(samples, alpha, m) - 1.0
    }))
}

/// Gradient descent on the SQL objective from the sample mean, with step
/// size `alpha^2`. The iterates increase monotonically to the root.
pub fn fit_m_sql_gd(samples: &[f64], alpha: f64) -> Result<f64> {
    check_samples(samples)?;
    check_positive("alpha", alpha)?;
    let mut m = mean(samples);
    for _ in 0..GD_MAX_ITER {
        let grad = (1.0 - sql_lhs(samples, alpha, m)) / alpha;
        let next = m - alpha * alpha * grad;
        // Iterates increase monotonically; a non-increasing step means rounding noise.
        if next <= m || next - m <= 1e-14 * m.abs().max(1.0) {
            return Ok(next.max(m));
        }
        m = next;
    }
    Err(Error::NonConvergence {
        iterations: GD_MAX_ITER,
        residual: (sql_lhs(samples, alpha, m) - 1.0).abs(),
    })
}

/// `alpha log mean exp(x / alpha)`, evaluated with the maximum factored out.
pub fn fit_m_eql(samples: &[f64], alpha: f64) -> Result<f64> {
    check_samples(samples)?;
    check_positive("alpha", alpha)?;
    let (_, hi) = min_max(samples);
    let mean_exp = samples.iter().map(|x| ((x - hi) / alpha).exp()).sum::<f64>() / samples.len() as f64;
    Ok(hi + alpha * mean_exp.ln())
}

/// Gradient descent on `E[exp((x - m)/alpha) + m/alpha]` from the maximum
/// with step size `alpha^2`. The iterates decrease monotonically to the root.
pub fn fit_m_eql_gd(samples: &[f64], alpha: f64) -> Result<f64> {
    check_samples(samples)?;
    check_positive("alpha", alpha)?;
    let (_, mut m) = min_max(samples);
    let n = samples.len() as f64;
    for _ in 0..GD_MAX_ITER {
        let e = samples.iter().map(|x| ((x - m) / alpha).exp()).sum::<f64>() / n;
        let next = m - alpha * (1.0 - e);
        if next >= m || m - next <= 1e-15 * m.abs().max(1.0) {
            return Ok(next.min(m));
        }
        m = next;
    }
    Err(Error::NonConvergence {
        iterations: GD_MAX_ITER,
        residual: f64::NAN,
    })
}

/// The `tau`-expectile: root of `tau E[(x-m)+] = (1-tau) E[(m-x)+]`.
pub fn fit_m_expectile(samples: &[f64], tau: f64) -> Result<f64> {
    check_samples(samples)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let (lo, hi) = min_max(samples);
    if lo == hi {
        return Ok(lo);
    }
    Ok(bisect_decreasing(lo, hi, |m| {
        samples
            .iter()
            .map(|&x| if x > m { tau * (x - m) } else { (1.0 - tau) * (x - m) })
            .sum()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub n_points: usize,
    pub n_bins: usize,
    pub noise: NoiseSpec,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            n_points: 5000,
            n_bins: 50,
            noise: NoiseSpec::Gaussian { sigma: 0.25 },
            alphas: vec![10.0, 2.0, 1.0, 0.5, 0.1],
            taus: vec![0.5, 0.7, 0.9, 0.95, 0.99],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRow {
    pub bin_center: f64,
    pub alpha_or_tau: f64,
    pub method: &'static str,
    pub m: f64,
}

/// Samples `y = sin(x) + noise` with `x` uniform on `[0, 2 pi)`, bins `x`
/// into equal-width buckets and fits every method in every nonempty bin.
pub fn sine_demo(config: &DemoConfig) -> Result<Vec<DemoRow>> {
    if config.n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    for &a in &config.alphas {
        check_positive("alpha", a)?;
    }
    for &t in &config.taus {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {t}")));
        }
    }
    let two_pi = std::f64::consts::TAU;
    let mut rng = rng::substream(config.seed, "toy");
    let noise = match config.noise {
        NoiseSpec::None => None,
        NoiseSpec::Gaussian { sigma } => Some(
            Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?,
        ),
    };
    let width = two_pi / config.n_bins as f64;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); config.n_bins];
    for _ in 0..config.n_points {
        let x: f64 = rng.random_range(0.0..two_pi);
        let y = x.sin() + noise.map_or(0.0, |n| n.sample(&mut rng));
        bins[((x / width) as usize).min(config.n_bins - 1)].push(y);
    }
    let per_bin = par::map_indices(config.n_bins, Exec::default(), |b| -> Result<Vec<DemoRow>> {
        let ys = &bins[b];
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let center = (b as f64 + 0.5) * width;
        let mut rows = Vec::new();
        for &a in &config.alphas {
            rows.push(DemoRow { bin_center: center, alpha_or_tau: a, method: "sql", m: fit_m_sql(ys, a)? });
            rows.push(DemoRow { bin_center: center, alpha_or_tau: a, method: "eql", m: fit_m_eql(ys, a)? });
        }
        for &t in &config.taus {
            rows.push(DemoRow {
                bin_center: center,
                alpha_or_tau: t,
                method: "expectile",
                m: fit_m_expectile(ys, t)?,
            });
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for rows in per_bin {
        out.extend(rows?);
    }
    Ok(out)
}

/// Writes `bin_center,alpha_or_tau,method,m`.
pub fn write_demo_csv<W: Write>(rows: &[DemoRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin_center", "alpha_or_tau", "method", "m"])?;
    for r in rows {
        out.write_record([r.bin_center.to_string(), r.alpha_or_tau.to_string(), r.method.to_string(), r.m.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
