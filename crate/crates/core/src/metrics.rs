//! Distances between cdfs on a shared grid, and range-query error.

use rand::Rng;

use crate::error::{Error, Result};
use crate::haar::{check_unit, StepCdf};

pub const DEFAULT_GRID: usize = 256;

/// Sorted raw samples: the exact empirical distribution.
#[derive(Debug, Clone)]
pub struct Empirical {
    sorted: Vec<f64>,
}

impl Empirical {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        for &x in samples {
            check_unit(x)?;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Empirical { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `F(x) = #{X_i <= x} / n`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&s| s <= x) as f64 / self.sorted.len() as f64
    }

    /// `#{a <= X_i <= b} / n`.
    pub fn fraction_in(&self, a: f64, b: f64) -> f64 {
        let lo = self.sorted.partition_point(|&s| s < a);
        let hi = self.sorted.partition_point(|&s| s <= b);
        hi.saturating_sub(lo) as f64 / self.sorted.len() as f64
    }

    /// `F(k/M)` for `k = 0..=M`.
    pub fn on_grid(&self, grid: usize) -> Result<StepCdf> {
        if grid == 0 {
            return Err(Error::invalid("cdf grid size must be at least 1"));
        }
        StepCdf::new((0..=grid).map(|k| self.cdf(k as f64 / grid as f64)).collect())
    }
}

fn check_grids(a: &StepCdf, b: &StepCdf) -> Result<()> {
    if a.grid() != b.grid() {
        Err(Error::GridMismatch {
            left: a.knots().len(),
            right: b.knots().len(),
        })
    } else {
        Ok(())
    }
}

/// `(1/M) sum_{k=1..M} |F1(k/M) - F2(k/M)|`.
pub fn wasserstein(est: &StepCdf, emp: &StepCdf) -> Result<f64> {
    check_grids(est, emp)?;
    let m = est.grid();
    let total: f64 = est.knots()[1..]
        .iter()
        .zip(&emp.knots()[1..])
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / m as f64)
}

/// `max_k |F1(k/M) - F2(k/M)|` over all knots.
pub fn ks(est: &StepCdf, emp: &StepCdf) -> Result<f64> {
    check_grids(est, emp)?;
    Ok(est
        .knots()
        .iter()
        .zip(emp.knots())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeQueryError {
    pub mean: f64,
    pub max: f64,
}

/// Error of `est(b) - est(a)` against the empirical fraction in `[a, b]`, over
/// `trials` intervals with `a ~ U[0, 1 - alpha]` and `b = a + alpha`.
pub fn range_query_error<R: Rng + ?Sized>(
    est: &StepCdf,
    emp: &Empirical,
    alpha: f64,
    trials: usize,
    rng: &mut R,
) -> Result<RangeQueryError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("range width must lie in (0, 1), got {alpha}")));
    }
    if trials == 0 {
        return Err(Error::invalid("at least one range query is needed"));
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for _ in 0..trials {
        let a = rng.gen::<f64>() * (1.0 - alpha);
        let b = a + alpha;
        let err = ((est.eval(b) - est.eval(a)) - emp.fraction_in(a, b)).abs();
        sum += err;
        max = max.max(err);
    }
    Ok(RangeQueryError {
        mean: sum / trials as f64,
        max,
    })
}

/// Mean absolute range-query error; see [`range_query_error`].
pub fn range_query_mae<R: Rng + ?Sized>(
    est: &StepCdf,
    emp: &Empirical,
    alpha: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    range_query_error(est, emp, alpha, trials, rng).map(|e| e.mean)
}
