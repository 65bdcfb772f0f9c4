//! Behavior-regularization functions `f` and their derived quantities.
//!
//! A regularizer penalizes a policy/behavior ratio `x = pi(a|s) / mu(a|s)` by
//! `f(x)`. Everything downstream works with `h_f(x) = x f(x)`, its derivative
//! `h_f'(x) = f(x) + x f'(x)` and the inverse `g_f = (h_f')^{-1}`, which maps a
//! scaled advantage to a policy/behavior ratio.
//!
//! | name          | f(x)                        | g_f(y)           | h_f'(0) |
//! |---------------|-----------------------------|------------------|---------|
//! | `chi_square`  | x - 1                       | y/2 + 1/2        | -1      |
//! | `reverse_kl`  | log x                       | exp(y - 1)       | -inf    |
//! | `alpha:<a>`   | (x^-a - 1) / (a (a - 1))    | (-a(y+c))^(-1/a) | a<0: -1/(a(a-1)), else -inf |
//!
//! Here `c = 1/(a(a-1))`. The alpha family clamps to 0 or infinity outside the
//! range of `h_f'`. Custom regularizers invert `h_f'` numerically.
//!
//! The divergence order is always called `a` here; `alpha` is reserved for
//! the regularization temperature.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Absolute tolerance on the `h_f'` residual targeted by the numeric inverse.
pub const INVERT_TOL: f64 = 1e-12;
/// Residual accepted once the bracket has collapsed to adjacent floats.
pub const INVERT_ACCEPT: f64 = 1e-10;
pub const INVERT_MAX_ITER: usize = 200;

#[derive(Clone)]
enum Family {
    ChiSquare,
    ReverseKl,
    Alpha(f64),
    Custom { f: ScalarFn, f_prime: ScalarFn },
}

#[derive(Clone)]
pub struct Regularizer {
    name: String,
    family: Family,
    hf_prime_at_zero: f64,
    hf_prime_sup: f64,
}

impl fmt::Debug for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Regularizer")
            .field("name", &self.name)
            .field("hf_prime_at_zero", &self.hf_prime_at_zero)
            .field("hf_prime_sup", &self.hf_prime_sup)
            .finish()
    }
}

impl PartialEq for Regularizer {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

/// `f(x) = x - 1`, the conservative penalty behind SQL.
pub fn make_chi_square() -> Regularizer {
    Regularizer {
        name: "chi_square".into(),
        family: Family::ChiSquare,
        hf_prime_at_zero: -1.0,
        hf_prime_sup: f64::INFINITY,
    }
}

/// `f(x) = log x`, behind EQL. Never sparse.
pub fn make_reverse_kl() -> Regularizer {
    Regularizer {
        name: "reverse_kl".into(),
        family: Family::ReverseKl,
        hf_prime_at_zero: f64::NEG_INFINITY,
        hf_prime_sup: f64::INFINITY,
    }
}

/// Member of the alpha-divergence family with order `a`.
///
/// `a = -1` is half the chi-square penalty and `a = 1/2` is Hellinger. The
/// orders 0 and 1 are the KL limits and are rejected.
pub fn make_alpha_divergence(a: f64) -> Result<Regularizer> {
    if !a.is_finite() || a == 0.0 || a == 1.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha-divergence order must be finite and not 0 or 1, got {a}"
        )));
    }
    let c = 1.0 / (a * (a - 1.0));
    // h_f'(x) = -x^{-a}/a - c
    let (at_zero, sup) = if a < 0.0 {
        (-c, f64::INFINITY)
    } else {
        (f64::NEG_INFINITY, -c)
    };
    Ok(Regularizer {
        name: format!("alpha:{a}"),
        family: Family::Alpha(a),
        hf_prime_at_zero: at_zero,
        hf_prime_sup: sup,
    })
}

impl Regularizer {
    /// Arbitrary `f` given with its derivative. `hf_prime_at_zero` and
    /// `hf_prime_sup` are the limits of `h_f'` at 0 and infinity.
    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        hf_prime_at_zero: f64,
        hf_prime_sup: f64,
    ) -> Self {
        Regularizer {
            name: name.into(),
            family: Family::Custom {
                f: Arc::new(f),
                f_prime: Arc::new(f_prime),
            },
            hf_prime_at_zero,
            hf_prime_sup,
        }
    }

    /// Parses `chi_square`, `reverse_kl` or `alpha:<a>`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim() {
            "chi_square" => Ok(make_chi_square()),
            "reverse_kl" => Ok(make_reverse_kl()),
            other => match other.strip_prefix("alpha:") {
                Some(a) => {
                    let a: f64 = a.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad alpha-divergence order in {other:?}"))
                    })?;
                    make_alpha_divergence(a)
                }
                None => Err(Error::InvalidArgument(format!("unknown regularizer {other:?}"))),
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn hf_prime_at_zero(&self) -> f64 {
        self.hf_prime_at_zero
    }

    pub fn hf_prime_sup(&self) -> f64 {
        self.hf_prime_sup
    }

    /// True when some scaled advantage maps to a non-positive ratio, i.e. the
    /// optimal policy can drop actions the behavior policy takes.
    pub fn supports_sparsity(&self) -> bool {
        self.hf_prime_at_zero.is_finite()
    }

    pub fn is_reverse_kl(&self) -> bool {
        matches!(self.family, Family::ReverseKl)
    }

    /// `f(x)` for `x > 0`.
    pub fn f(&self, x: f64) -> f64 {
        match &self.family {
            Family::ChiSquare => x - 1.0,
            Family::ReverseKl => x.ln(),
            Family::Alpha(a) => (x.powf(-a) - 1.0) / (a * (a - 1.0)),
            Family::Custom { f, .. } => f(x),
        }
    }

    pub fn f_prime(&self, x: f64) -> f64 {
        match &self.family {
            Family::ChiSquare => 1.0,
            Family::ReverseKl => 1.0 / x,
            Family::Alpha(a) => -x.powf(-a - 1.0) / (a - 1.0),
            Family::Custom { f_prime, .. } => f_prime(x),
        }
    }

    /// `h_f(x) = x f(x)`, extended to `x = 0` by its limit.
    pub fn hf(&self, x: f64) -> f64 {
        if x > 0.0 {
            return x * self.f(x);
        }
        match &self.family {
            Family::ChiSquare | Family::ReverseKl => 0.0,
            Family::Alpha(a) if *a < 1.0 => 0.0,
            Family::Alpha(_) => f64::INFINITY,
            Family::Custom { f, .. } => {
                let t = f64::MIN_POSITIVE;
                t * f(t)
            }
        }
    }

    /// `h_f'(x) = f(x) + x f'(x)` for `x > 0`; the stored limit at `x = 0`.
    pub fn hf_prime(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.hf_prime_at_zero;
        }
        match &self.family {
            Family::ChiSquare => 2.0 * x - 1.0,
            Family::ReverseKl => x.ln() + 1.0,
            Family::Alpha(a) => -x.powf(-a) / a - 1.0 / (a * (a - 1.0)),
            Family::Custom { f, f_prime } => f(x) + x * f_prime(x),
        }
    }

    /// `g_f(y)`, the inverse of `h_f'`.
    ///
    /// Families with a closed form extend it past the range of `h_f'` (chi-square
    /// returns negative ratios below `h_f'(0)`). Other families clamp: 0 at or
    /// below `h_f'(0)`, infinity at or above the supremum.
    pub fn g_f(&self, y: f64) -> f64 {
        match &self.family {
            Family::ChiSquare => 0.5 * y + 0.5,
            Family::ReverseKl => (y - 1.0).exp(),
            Family::Alpha(a) => {
                let t = -a * (y + 1.0 / (a * (a - 1.0)));
                if t > 0.0 {
                    t.powf(-1.0 / a)
                } else if *a < 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            _ => match invert_hf_prime(self, y, true) {
                Ok(x) => x,
                Err(Error::NonConvergence { .. }) => bisect_hf_prime(self, y).0,
                Err(_) => f64::NAN,
            },
        }
    }

    /// The f-divergence `sum_a mu(a) h_f(pi(a)/mu(a))` over the support of `mu`.
    pub fn divergence(&self, mu: &[f64], pi: &[f64]) -> Result<f64> {
        if mu.len() != pi.len() {
            return Err(Error::InvalidArgument("mu and pi lengths differ".into()));
        }
        let mut total = 0.0;
        for (a, (&m, &p)) in mu.iter().zip(pi).enumerate() {
            if m > 0.0 {
                total += m * self.hf(p / m);
            } else if p > 0.0 {
                return Err(Error::SupportViolation {
                    state: 0,
                    action: a,
                    mass: p,
                });
            }
        }
        Ok(total)
    }
}

/// Numeric `g_f`: solves `h_f'(x) = y` on `x > 0` by bisection on a bracket
/// grown geometrically from `x = 1`.
///
/// With `clamp`, values of `y` at or below `h_f'(0)` map to 0 and values at or
/// above the supremum map to infinity; without it they are errors.
pub fn invert_hf_prime(reg: &Regularizer, y: f64, clamp: bool) -> Result<f64> {
    if y.is_nan() {
        return Err(Error::InvalidArgument("cannot invert NaN".into()));
    }
    let below = || if clamp { Ok(0.0) } else { Err(Error::OutOfRange { y }) };
    let above = || {
        if clamp {
            Ok(f64::INFINITY)
        } else {
            Err(Error::OutOfRange { y })
        }
    };
    if y <= reg.hf_prime_at_zero {
        return below();
    }
    if y >= reg.hf_prime_sup {
        return above();
    }
    let h1 = reg.hf_prime(1.0);
    if h1 == y {
        return Ok(1.0);
    }
    if h1 < y {
        let mut hi = 2.0;
        while reg.hf_prime(hi) < y {
            hi *= 2.0;
            if hi > 1e300 {
                return above();
            }
        }
    } else {
        let mut lo = 0.5;
        while reg.hf_prime(lo) > y {
            lo *= 0.5;
            if lo < 1e-300 {
                return below();
            }
        }
    }
    let (x, residual, iterations) = bisect_hf_prime(reg, y);
    if residual <= INVERT_ACCEPT {
        Ok(x)
    } else {
        Err(Error::NonConvergence {
            iterations,
            residual,
        })
    }
}

/// Bracket + bisect; returns the best point, its residual and the iterations used.
fn bisect_hf_prime(reg: &Regularizer, y: f64) -> (f64, f64, usize) {
    let (mut lo, mut hi) = (1.0_f64, 1.0_f64);
    if reg.hf_prime(1.0) < y {
        hi = 2.0;
        while reg.hf_prime(hi) < y && hi < 1e300 {
            lo = hi;
            hi *= 2.0;
        }
    } else {
        lo = 0.5;
        while reg.hf_prime(lo) > y && lo > 1e-300 {
            hi = lo;
            lo *= 0.5;
        }
    }
    let mut best = (lo, (reg.hf_prime(lo) - y).abs());
    let mut iterations = 0;
    for it in 0..INVERT_MAX_ITER {
        iterations = it + 1;
        let mid = 0.5 * (lo + hi);
        let r = reg.hf_prime(mid) - y;
        if r.abs() < best.1 {
            best = (mid, r.abs());
        }
        if r.abs() <= INVERT_TOL || mid <= lo || mid >= hi {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_hi = (reg.hf_prime(hi) - y).abs();
    if r_hi < best.1 {
        best = (hi, r_hi);
    }
    (best.0, best.1, iterations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }
}

/// Outcome of probing the three regularizer conditions on a sample grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub f_one_is_zero: Check,
    pub hf_strictly_convex: Check,
    pub differentiable: Check,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.f_one_is_zero.passed && self.hf_strictly_convex.passed && self.differentiable.passed
    }
}

/// Checks `f(1) = 0`, strict convexity of `h_f` (increasing secant slopes) and
/// agreement of `f'` with central differences on `grid`.
pub fn validate_assumption2(reg: &Regularizer, grid: &[f64]) -> Result<ValidationReport> {
    if grid.is_empty() || grid.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "validation grid must be nonempty, finite and positive".into(),
        ));
    }
    let f1 = reg.f(1.0);
    let f_one_is_zero = Check::new(f1.abs() <= 1e-12, format!("f(1) = {f1:e}"));

    let mut xs = grid.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let hf_strictly_convex = if xs.len() < 3 {
        Check::new(true, "fewer than three grid points, nothing to test")
    } else {
        let slopes: Vec<f64> = xs
            .windows(2)
            .map(|w| (reg.hf(w[1]) - reg.hf(w[0])) / (w[1] - w[0]))
            .collect();
        match slopes.windows(2).position(|s| !(s[1] > s[0])) {
            None => Check::new(true, format!("{} second differences positive", slopes.len() - 1)),
            Some(i) => Check::new(
                false,
                format!("second difference not positive around x = {}", xs[i + 1]),
            ),
        }
    };

    let mut worst = (0.0_f64, f64::NAN);
    let mut finite = true;
    for &x in &xs {
        let h = 1e-6 * x;
        let fd = (reg.f(x + h) - reg.f(x - h)) / (2.0 * h);
        let an = reg.f_prime(x);
        if !fd.is_finite() || !an.is_finite() {
            finite = false;
            worst = (f64::INFINITY, x);
            break;
        }
        let err = (fd - an).abs() / (1.0 + an.abs());
        if err > worst.0 {
            worst = (err, x);
        }
    }
    let differentiable = Check::new(
        finite && worst.0 <= 1e-5,
        format!("max relative derivative mismatch {:e} at x = {}", worst.0, worst.1),
    );

    Ok(ValidationReport {
        f_one_is_zero,
        hf_strictly_convex,
        differentiable,
    })
}

/// Geometric grid with `n` points on `[lo, hi]`.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (r * i as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn registered() -> Vec<Regularizer> {
        vec![
            make_chi_square(),
            make_reverse_kl(),
            make_alpha_divergence(-1.0).unwrap(),
            make_alpha_divergence(0.5).unwrap(),
            make_alpha_divergence(2.0).unwrap(),
        ]
    }

    #[test]
    fn chi_square_values() {
        let r = make_chi_square();
        assert_eq!(r.f(1.0), 0.0);
        assert_eq!(r.g_f(1.0), 1.0);
        assert_eq!(r.g_f(-1.0), 0.0);
        assert_eq!(r.hf_prime(3.0), 5.0);
        assert_eq!(r.hf_prime_at_zero(), -1.0);
        assert!(r.supports_sparsity());
    }

    #[test]
    fn reverse_kl_values() {
        let r = make_reverse_kl();
        assert_eq!(r.g_f(1.0), 1.0);
        assert_abs_diff_eq!(r.g_f(0.0), 0.367879, epsilon = 1e-6);
        assert_eq!(r.f(1.0), 0.0);
        assert_eq!(r.hf_prime_at_zero(), f64::NEG_INFINITY);
        assert!(!r.supports_sparsity());
    }

    #[test]
    fn alpha_family() {
        let neyman = make_alpha_divergence(-1.0).unwrap();
        assert_abs_diff_eq!(neyman.f(2.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(neyman.hf_prime_at_zero(), -0.5, epsilon = 1e-15);
        assert!(neyman.supports_sparsity());
        for a in [-3.0, -1.0, -0.5, 0.5, 2.0, 3.5] {
            assert_abs_diff_eq!(make_alpha_divergence(a).unwrap().f(1.0), 0.0, epsilon = 1e-15);
        }
        let hellinger = make_alpha_divergence(0.5).unwrap();
        let grid = geometric_grid(1e-3, 10.0, 200);
        assert!(validate_assumption2(&hellinger, &grid).unwrap().passed());
        assert!(!hellinger.supports_sparsity());
        assert_abs_diff_eq!(hellinger.hf_prime_sup(), 4.0, epsilon = 1e-12);
        for a in [-2.0, -0.5, 0.5, 3.0] {
            let r = make_alpha_divergence(a).unwrap();
            for y in [-5.0, -1.0, -0.2, 0.3, 1.0, 3.9, 12.0] {
                let closed = r.g_f(y);
                let numeric = invert_hf_prime(&r, y, true).unwrap();
                if numeric.is_finite() {
                    assert_relative_eq!(closed, numeric, max_relative = 1e-8);
                } else {
                    assert_eq!(closed, numeric);
                }
            }
        }
        assert!(make_alpha_divergence(0.0).is_err());
        assert!(make_alpha_divergence(1.0).is_err());
        assert!(make_alpha_divergence(f64::NAN).is_err());
    }

    #[test]
    fn names_round_trip() {
        for r in registered() {
            assert_eq!(Regularizer::from_name(r.name()).unwrap().name(), r.name());
        }
        assert!(Regularizer::from_name("tv").is_err());
        assert!(Regularizer::from_name("alpha:x").is_err());
        assert!(Regularizer::from_name("alpha:1").is_err());
    }

    #[test]
    fn inversion_examples() {
        assert_abs_diff_eq!(invert_hf_prime(&make_chi_square(), 3.0, false).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(invert_hf_prime(&make_reverse_kl(), 1.0, false).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            invert_hf_prime(&make_chi_square(), -2.0, false),
            Err(Error::OutOfRange { .. })
        ));
        assert_eq!(invert_hf_prime(&make_chi_square(), -2.0, true).unwrap(), 0.0);
        let hellinger = make_alpha_divergence(0.5).unwrap();
        assert!(invert_hf_prime(&hellinger, 4.5, false).is_err());
        assert_eq!(invert_hf_prime(&hellinger, 4.5, true).unwrap(), f64::INFINITY);
        assert!(invert_hf_prime(&hellinger, f64::NAN, true).is_err());
    }

    #[test]
    fn validation_catches_violations() {
        let grid = geometric_grid(1e-3, 10.0, 100);
        let report = validate_assumption2(&make_chi_square(), &grid).unwrap();
        assert!(report.passed(), "{report:?}");

        let shifted = Regularizer::custom("x", |x| x, |_| 1.0, f64::NEG_INFINITY, f64::INFINITY);
        let report = validate_assumption2(&shifted, &grid).unwrap();
        assert!(!report.f_one_is_zero.passed);
        assert!(report.hf_strictly_convex.passed);

        let concave = Regularizer::custom("1-x", |x| 1.0 - x, |_| -1.0, 1.0, f64::NEG_INFINITY);
        let report = validate_assumption2(&concave, &grid).unwrap();
        assert!(report.f_one_is_zero.passed);
        assert!(!report.hf_strictly_convex.passed);

        let kinked = Regularizer::custom(
            "kink",
            |x: f64| (x - 1.0).abs() + (x - 1.0),
            |x| if x > 1.0 { 2.0 } else { 0.0 },
            0.0,
            f64::INFINITY,
        );
        let report = validate_assumption2(&kinked, &[0.5, 1.0, 2.0]).unwrap();
        assert!(!report.differentiable.passed);

        assert!(validate_assumption2(&make_chi_square(), &[]).is_err());
        assert!(validate_assumption2(&make_chi_square(), &[1.0, -1.0]).is_err());
    }

    #[test]
    fn sparsity_flag_matches_inverse_sign() {
        let ys: Vec<f64> = (0..400).map(|i| -20.0 + 0.1 * i as f64).collect();
        for r in registered() {
            let attains = ys
                .iter()
                .filter(|&&y| y < r.hf_prime_sup())
                .any(|&y| r.g_f(y) <= 0.0);
            assert_eq!(attains, r.supports_sparsity(), "{}", r.name());
        }
    }

    #[test]
    fn inversion_round_trip_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for r in registered() {
            for _ in 0..1000 {
                let x: f64 = rng.random_range(1e-6..=50.0);
                let back = r.g_f(r.hf_prime(x));
                assert!(
                    ((back - x) / x).abs() <= 1e-8,
                    "{}: x = {x}, g(h'(x)) = {back}",
                    r.name()
                );
            }
        }
    }

    proptest! {
        #[test]
        fn hf_prime_of_inverse(y in -0.49f64..30.0) {
            for r in registered() {
                if y <= r.hf_prime_at_zero() || y >= r.hf_prime_sup() { continue; }
                let x = invert_hf_prime(&r, y, false).unwrap();
                prop_assert!((r.hf_prime(x) - y).abs() <= 1e-10, "{} y={} x={}", r.name(), y, x);
            }
        }

        #[test]
        fn jensen_positivity(
            raw_mu in prop::collection::vec(0.01f64..1.0, 2..6),
            raw_pi in prop::collection::vec(0.0f64..1.0, 6),
        ) {
            let n = raw_mu.len();
            let smu: f64 = raw_mu.iter().sum();
            let mu: Vec<f64> = raw_mu.iter().map(|m| m / smu).collect();
            let spi: f64 = raw_pi[..n].iter().sum::<f64>() + 1e-9;
            let pi: Vec<f64> = raw_pi[..n].iter().map(|p| p / spi).collect();
            let spi: f64 = pi.iter().sum();
            let pi: Vec<f64> = pi.iter().map(|p| p / spi).collect();
            for r in registered() {
                let d = r.divergence(&mu, &pi).unwrap();
                prop_assert!(d >= -1e-12, "{}: {}", r.name(), d);
                let same = r.divergence(&mu, &mu).unwrap();
                prop_assert!(same.abs() <= 1e-10);
                let tv: f64 = mu.iter().zip(&pi).map(|(m, p)| (m - p).abs()).sum();
                if tv > 1e-3 {
                    prop_assert!(d > 1e-10, "{}: {} at tv {}", r.name(), d, tv);
                }
            }
        }
    }
}
