//! Binning baselines: categorical frequency oracles over `d` equal-width bins.
//!
//! Each user reports its bin through k-ary randomized response (kRR) or
//! optimized unary encoding (OUE); the raw frequency estimate is projected to
//! the simplex with Norm-Sub and turned into a piecewise-linear cdf.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::haar::{check_unit, StepCdf};
use crate::mechanism::PrivacyBudget;
use crate::seed::{derive_seed, tags};

const CHUNK: usize = 4096;

/// Estimated frequencies of `d` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    values: Vec<f64>,
}

impl FrequencyVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("a frequency vector needs at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite frequency"));
        }
        Ok(FrequencyVector { values })
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Non-negative entries summing to one within `tol`.
    pub fn on_simplex(&self, tol: f64) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (self.values.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

fn check_categories(d: usize) -> Result<()> {
    if d < 2 {
        Err(Error::invalid(format!("at least two categories needed, got {d}")))
    } else {
        Ok(())
    }
}

fn check_category(x: usize, d: usize) -> Result<()> {
    check_categories(d)?;
    if x >= d {
        Err(Error::invalid(format!("category {x} out of range for d = {d}")))
    } else {
        Ok(())
    }
}

/// Bin of `x` among `d` equal-width bins, with `x = 1` in the last bin.
pub fn bin_of(x: f64, d: usize) -> Result<usize> {
    check_unit(x)?;
    check_categories(d)?;
    Ok(((x * d as f64) as usize).min(d - 1))
}

/// kRR probabilities `(p, q)`: report the truth w.p. `p`, each other category w.p. `q`.
pub fn krr_probs(d: usize, eps: PrivacyBudget) -> (f64, f64) {
    let e = eps.epsilon().exp();
    let z = e + d as f64 - 1.0;
    (e / z, 1.0 / z)
}

pub fn krr_pmf(report: usize, x: usize, d: usize, eps: PrivacyBudget) -> f64 {
    let (p, q) = krr_probs(d, eps);
    if report == x {
        p
    } else {
        q
    }
}

pub fn krr_perturb<R: Rng + ?Sized>(x: usize, d: usize, eps: PrivacyBudget, rng: &mut R) -> Result<usize> {
    check_category(x, d)?;
    let (p, _) = krr_probs(d, eps);
    if rng.gen::<f64>() < p {
        Ok(x)
    } else {
        // Uniform over the other d - 1 categories.
        let y = rng.gen_range(0..d - 1);
        Ok(if y >= x { y + 1 } else { y })
    }
}

fn krr_from_counts(counts: &[u64], n: usize, eps: PrivacyBudget) -> FrequencyVector {
    let (p, q) = krr_probs(counts.len(), eps);
    let values = counts
        .iter()
        .map(|&c| (c as f64 / n as f64 - q) / (p - q))
        .collect();
    FrequencyVector { values }
}

/// Unbiased frequencies `(f_j - q) / (p - q)` from kRR reports.
pub fn krr_estimate(reports: &[usize], d: usize, eps: PrivacyBudget) -> Result<FrequencyVector> {
    check_categories(d)?;
    if reports.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut counts = vec![0u64; d];
    for &y in reports {
        check_category(y, d)?;
        counts[y] += 1;
    }
    Ok(krr_from_counts(&counts, reports.len(), eps))
}

/// OUE bit probabilities: `P(bit x set | x) = 1/2`, `P(bit j set | x != j) = 1/(e^eps + 1)`.
pub fn oue_probs(eps: PrivacyBudget) -> (f64, f64) {
    (0.5, 1.0 / (eps.epsilon().exp() + 1.0))
}

/// Probability of the whole bit vector `report` given category `x`.
pub fn oue_pmf(report: &[bool], x: usize, eps: PrivacyBudget) -> f64 {
    let (p, q) = oue_probs(eps);
    report
        .iter()
        .enumerate()
        .map(|(j, &bit)| {
            let on = if j == x { p } else { q };
            if bit {
                on
            } else {
                1.0 - on
            }
        })
        .product()
}

fn oue_perturb_with<R: Rng + ?Sized, F: FnMut(usize)>(x: usize, d: usize, eps: PrivacyBudget, rng: &mut R, mut set: F) {
    let (p, q) = oue_probs(eps);
    for j in 0..d {
        let on = if j == x { p } else { q };
        if rng.gen::<f64>() < on {
            set(j);
        }
    }
}

pub fn oue_perturb<R: Rng + ?Sized>(x: usize, d: usize, eps: PrivacyBudget, rng: &mut R) -> Result<Vec<bool>> {
    check_category(x, d)?;
    let mut bits = vec![false; d];
    oue_perturb_with(x, d, eps, rng, |j| bits[j] = true);
    Ok(bits)
}

fn oue_from_counts(counts: &[u64], n: usize, eps: PrivacyBudget) -> FrequencyVector {
    let (p, q) = oue_probs(eps);
    let values = counts
        .iter()
        .map(|&c| (c as f64 / n as f64 - q) / (p - q))
        .collect();
    FrequencyVector { values }
}

pub fn oue_estimate(reports: &[Vec<bool>], d: usize, eps: PrivacyBudget) -> Result<FrequencyVector> {
    check_categories(d)?;
    if reports.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut counts = vec![0u64; d];
    for r in reports {
        if r.len() != d {
            return Err(Error::invalid(format!("OUE report of length {} for d = {d}", r.len())));
        }
        for (c, &bit) in counts.iter_mut().zip(r) {
            *c += u64::from(bit);
        }
    }
    Ok(oue_from_counts(&counts, reports.len(), eps))
}

/// Norm-Sub: zero the negative entries, shift the positive ones by a common
/// amount so the total is one, and repeat until nothing is negative.
/// A vector with no positive entry maps to the uniform vector.
pub fn normsub(raw: &FrequencyVector) -> FrequencyVector {
    let d = raw.values.len();
    let mut v: Vec<f64> = raw.values.iter().map(|&x| x.max(0.0)).collect();
    loop {
        let active: Vec<usize> = (0..d).filter(|&i| v[i] > 0.0).collect();
        if active.is_empty() {
            return FrequencyVector {
                values: vec![1.0 / d as f64; d],
            };
        }
        let total: f64 = active.iter().map(|&i| v[i]).sum();
        let delta = (total - 1.0) / active.len() as f64;
        let mut clipped = false;
        for &i in &active {
            v[i] -= delta;
            if v[i] <= 0.0 {
                v[i] = 0.0;
                clipped = true;
            }
        }
        if !clipped {
            return FrequencyVector { values: v };
        }
    }
}

/// Cdf that is exact at the bin edges `k/d` and linear within each bin,
/// sampled at `i/G` for `i = 0..=G`.
pub fn binned_cdf(freq: &FrequencyVector, grid: usize) -> Result<StepCdf> {
    if grid == 0 {
        return Err(Error::invalid("cdf grid size must be at least 1"));
    }
    let d = freq.values.len();
    let mut cum = Vec::with_capacity(d + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for &f in &freq.values {
        acc += f;
        cum.push(acc);
    }
    let knots = (0..=grid)
        .map(|i| {
            let num = i as u128 * d as u128;
            let b = (num / grid as u128) as usize;
            if b >= d {
                cum[d]
            } else {
                let frac = (num % grid as u128) as f64 / grid as f64;
                cum[b] + freq.values[b] * frac
            }
        })
        .collect();
    StepCdf::new(knots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    Krr,
    Oue,
}

/// kRR when `d < 3 e^eps + 2`, OUE otherwise.
pub fn choose_oracle(d: usize, eps: PrivacyBudget) -> Oracle {
    if (d as f64) < 3.0 * eps.epsilon().exp() + 2.0 {
        Oracle::Krr
    } else {
        Oracle::Oue
    }
}

/// Private binned histogram of `samples` over `d` bins, calibrated with Norm-Sub.
///
/// Each user draws from its own ChaCha stream, so the result is independent
/// of thread count.
pub fn binning_estimate(samples: &[f64], d: usize, eps: PrivacyBudget, seed: u64) -> Result<FrequencyVector> {
    check_categories(d)?;
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let bins = samples
        .iter()
        .map(|&x| bin_of(x, d))
        .collect::<Result<Vec<_>>>()?;
    let oracle = choose_oracle(d, eps);
    let base = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tags::USER]));
    let counts = bins
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut counts = vec![0u64; d];
            for (i, &x) in chunk.iter().enumerate() {
                let mut rng = base.clone();
                rng.set_stream((c * CHUNK + i) as u64);
                match oracle {
                    Oracle::Krr => {
                        let y = krr_perturb(x, d, eps, &mut rng).expect("bin index in range");
                        counts[y] += 1;
                    }
                    Oracle::Oue => oue_perturb_with(x, d, eps, &mut rng, |j| counts[j] += 1),
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; d],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let raw = match oracle {
        Oracle::Krr => krr_from_counts(&counts, samples.len(), eps),
        Oracle::Oue => oue_from_counts(&counts, samples.len(), eps),
    };
    Ok(normsub(&raw))
}
