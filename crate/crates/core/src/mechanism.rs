//! Signed subset-selection randomizer for one wavelet level.
//!
//! A user at level `j` holds a 1-sparse vector `v` in `{-1, 0, 1}^d` with
//! `d = 2^j` (see [`encode`]). The randomizer outputs an `m`-sparse vector `y`
//! in `{-1, 0, 1}^d` with probability `e^eps / Omega` when `<y, v> = 1` and
//! `1 / Omega` otherwise, where
//!
//! ```text
//! Omega = C(d-1, m-1) 2^(m-1) (e^eps + 1) + C(d-1, m) 2^m.
//! ```
//!
//! Writing `A = C(d-1, m-1) 2^(m-1)` and `r = 2(d-m)/m = C(d-1, m) 2^m / A`, all
//! derived quantities are evaluated through `r`, which never overflows:
//!
//! * `p = P(Y(k) = 1 | v(k) = 1) = e^eps / (e^eps + 1 + r)`
//! * `P(Y(k) = -1 | v(k) = 1) = p e^-eps`
//! * `q = P(Y(k) = 1 | v(k) = 0) = p e^-eps [(m-1)(e^eps+1) / (2(d-1)) + (d-m)/(d-1)]`
//!
//! and by sign symmetry `P(Y(k) = -1 | v(k) = 0) = q` as well, so
//! `E[Y | v] = p (1 - e^-eps) v` and `Var[Y(k) | v(k) = 0] = 2q`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::haar::{self, check_unit, level_scale};

/// Upper limit on `|Y|` for exhaustive enumeration.
pub const ENUMERATION_LIMIT: u128 = 1 << 16;

/// A per-user privacy budget, in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PrivacyBudget(f64);

impl PrivacyBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon.is_finite() && epsilon > 0.0 {
            Ok(PrivacyBudget(epsilon))
        } else {
            Err(Error::invalid(format!(
                "privacy budget must be positive and finite, got {epsilon}"
            )))
        }
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A user's encoded value at one level: `sign * e_position` in `{-1, 0, 1}^(2^j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedReport {
    pub level: u32,
    pub position: u32,
    pub sign: i8,
}

impl EncodedReport {
    pub fn new(level: u32, position: u32, sign: i8) -> Result<Self> {
        haar::HaarIndex::new(level, position)?;
        if sign != 1 && sign != -1 {
            return Err(Error::invalid(format!("sign must be +1 or -1, got {sign}")));
        }
        Ok(EncodedReport {
            level,
            position,
            sign,
        })
    }

    /// Dense form, `2^(-j/2) (psi_j0(x), ..., psi_j,d-1(x))`.
    pub fn to_dense(&self) -> Vec<i8> {
        let mut v = vec![0; 1 << self.level];
        v[self.position as usize] = self.sign;
        v
    }
}

/// Encodes `x` at level `j`: the unique `k` with `psi_jk(x) != 0` and its sign.
pub fn encode(x: f64, level: u32) -> Result<EncodedReport> {
    check_unit(x)?;
    if level > haar::MAX_LEVEL {
        return Err(Error::invalid(format!("level {level} exceeds the maximum")));
    }
    let (position, sign) = haar::locate(x, level);
    Ok(EncodedReport {
        level,
        position: position as u32,
        sign,
    })
}

/// A randomized report: `m` distinct positions, each carrying a sign.
///
/// The wire form is `j:pos±,pos±,...`, e.g. `3:0+,5-`. Pairs are kept sorted
/// by position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PerturbedReport {
    level: u32,
    support: Vec<(u32, i8)>,
}

impl PerturbedReport {
    pub fn new(level: u32, mut support: Vec<(u32, i8)>) -> Result<Self> {
        if level > haar::MAX_LEVEL {
            return Err(Error::invalid(format!("level {level} exceeds the maximum")));
        }
        if support.is_empty() {
            return Err(Error::invalid("a report carries at least one coordinate"));
        }
        support.sort_unstable_by_key(|&(pos, _)| pos);
        let d = 1u64 << level;
        for (i, &(pos, sign)) in support.iter().enumerate() {
            if u64::from(pos) >= d {
                return Err(Error::invalid(format!(
                    "position {pos} out of range for level {level}"
                )));
            }
            if sign != 1 && sign != -1 {
                return Err(Error::invalid(format!("sign must be +1 or -1, got {sign}")));
            }
            if i > 0 && support[i - 1].0 == pos {
                return Err(Error::invalid(format!("position {pos} repeated")));
            }
        }
        Ok(PerturbedReport { level, support })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn support(&self) -> &[(u32, i8)] {
        &self.support
    }

    /// `||y||_0`.
    pub fn sparsity(&self) -> usize {
        self.support.len()
    }

    pub fn value_at(&self, position: u32) -> i8 {
        self.support
            .binary_search_by_key(&position, |&(p, _)| p)
            .map(|i| self.support[i].1)
            .unwrap_or(0)
    }

    /// `<y, v>`, which is always -1, 0 or 1.
    pub fn inner(&self, v: &EncodedReport) -> i8 {
        self.value_at(v.position) * v.sign
    }

    pub fn to_dense(&self) -> Vec<i8> {
        let mut y = vec![0; 1 << self.level];
        for &(pos, sign) in &self.support {
            y[pos as usize] = sign;
        }
        y
    }
}

impl fmt::Display for PerturbedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.level)?;
        for (i, &(pos, sign)) in self.support.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{pos}{}", if sign > 0 { '+' } else { '-' })?;
        }
        Ok(())
    }
}

impl FromStr for PerturbedReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::invalid(format!("malformed report {s:?}: {why}"));
        let (level, rest) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let level: u32 = level.trim().parse().map_err(|_| bad("bad level"))?;
        let support = rest
            .split(',')
            .map(|item| {
                let item = item.trim();
                let (pos, sign) = match item.as_bytes().last() {
                    Some(b'+') => (&item[..item.len() - 1], 1),
                    Some(b'-') => (&item[..item.len() - 1], -1),
                    _ => return Err(bad("every position needs a trailing sign")),
                };
                let pos: u32 = pos.parse().map_err(|_| bad("bad position"))?;
                Ok((pos, sign))
            })
            .collect::<Result<Vec<_>>>()?;
        PerturbedReport::new(level, support)
    }
}

/// Parameters of the randomizer at one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismParams {
    d: usize,
    m: usize,
    epsilon: PrivacyBudget,
    p: f64,
    q: f64,
    log_omega: f64,
    // e^eps + 1 + r; the special coordinate keeps its sign w.p. e^eps/denom,
    // flips w.p. 1/denom and is zeroed w.p. r/denom.
    denom: f64,
    r: f64,
}

/// `(p, q, r, e^eps + 1 + r)` from the ratio identities.
fn ratio_form(d: usize, m: usize, eps: f64) -> (f64, f64, f64, f64) {
    let e = eps.exp();
    let (df, mf) = (d as f64, m as f64);
    let r = 2.0 * (df - mf) / mf;
    let denom = e + 1.0 + r;
    let p = e / denom;
    let q = if d == 1 {
        // Lemma form for m = 1: q = 1/Omega, with Omega = e^eps + 1 here.
        1.0 / denom
    } else {
        (p / e) * ((mf - 1.0) * (e + 1.0) / (2.0 * (df - 1.0)) + (df - mf) / (df - 1.0))
    };
    (p, q, r, denom)
}

/// `ln C(n, k)` by direct summation, `O(min(k, n-k))`.
pub(crate) fn ln_binomial(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (1..=k)
        .map(|i| ((n - k + i) as f64 / i as f64).ln())
        .sum()
}

pub fn derive_params(d: usize, m: usize, eps: PrivacyBudget) -> Result<MechanismParams> {
    if d == 0 || !d.is_power_of_two() || d > 1 << haar::MAX_LEVEL {
        return Err(Error::invalid(format!(
            "dimension {d} is not a power of two within range"
        )));
    }
    if m == 0 || m > d {
        return Err(Error::invalid(format!("m = {m} outside [1, {d}]")));
    }
    let (p, q, r, denom) = ratio_form(d, m, eps.0);
    let ln_a = ln_binomial(d as u64 - 1, m as u64 - 1) + (m as f64 - 1.0) * std::f64::consts::LN_2;
    Ok(MechanismParams {
        d,
        m,
        epsilon: eps,
        p,
        q,
        log_omega: ln_a + denom.ln(),
        denom,
        r,
    })
}

impl MechanismParams {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn level(&self) -> u32 {
        self.d.trailing_zeros()
    }

    pub fn epsilon(&self) -> PrivacyBudget {
        self.epsilon
    }

    /// `P(Y(k) = 1 | v(k) = 1)`.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// `P(Y(k) = 1 | v(k) = 0)`.
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn log_omega(&self) -> f64 {
        self.log_omega
    }

    /// `P(Y(k) = -1 | v(k) = 1) = p e^-eps`.
    pub fn flip_prob(&self) -> f64 {
        1.0 / self.denom
    }

    /// `P(Y(k) = 0 | v(k) = 1) = 1 - p (1 + e^-eps)`.
    pub fn zero_prob(&self) -> f64 {
        self.r / self.denom
    }

    /// `p (1 - e^-eps)`, the factor in `E[Y | v] = p (1 - e^-eps) v`.
    pub fn expectation_scale(&self) -> f64 {
        (self.epsilon.0.exp() - 1.0) / self.denom
    }

    /// `|Y| = C(d, m) 2^m`, or `None` when it does not fit in a `u128`.
    pub fn output_space_size(&self) -> Option<u128> {
        binomial_u128(self.d as u64, self.m as u64)?.checked_mul(1u128.checked_shl(self.m as u32)?)
    }
}

pub(crate) fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        // acc * (n-k+i) is divisible by i at every step.
        acc = acc.checked_mul(u128::from(n - k + i))? / u128::from(i);
    }
    Some(acc)
}

/// The bracketed per-level variance factor minimized by the choice of `m`:
/// `(1 + e^-eps) / (p (1 - e^-eps)^2) + 2 q (d-1) / (p^2 (1 - e^-eps)^2)`.
pub fn variance_factor(d: usize, m: usize, eps: PrivacyBudget) -> f64 {
    let (p, q, _, _) = ratio_form(d, m, eps.0);
    let em = (-eps.0).exp();
    let c = (1.0 - em) * (1.0 - em);
    (1.0 + em) / (p * c) + 2.0 * q * (d as f64 - 1.0) / (p * p * c)
}

/// `m` in `1..=d` minimizing [`variance_factor`]; ties go to the smaller `m`.
pub fn optimal_m(d: usize, eps: PrivacyBudget) -> usize {
    let mut best = (1, variance_factor(d, 1, eps));
    for m in 2..=d {
        let v = variance_factor(d, m, eps);
        if v < best.1 {
            best = (m, v);
        }
    }
    best.0
}

/// `V_j = 2^j min_m variance_factor`: with `n_j` users at level `j`, the total
/// variance of the level's coefficients, allocation randomness included, is at
/// most `V_j / n_j`.
pub fn level_constant(level: u32, eps: PrivacyBudget) -> f64 {
    let d = 1usize << level;
    d as f64 * variance_factor(d, optimal_m(d, eps), eps)
}

fn check_report_level(v: &EncodedReport, params: &MechanismParams) -> Result<()> {
    if 1usize << v.level != params.d {
        return Err(Error::invalid(format!(
            "report at level {} does not match mechanism dimension {}",
            v.level, params.d
        )));
    }
    if v.position as usize >= params.d {
        return Err(Error::invalid("report position out of range"));
    }
    Ok(())
}

/// Rejection sampler: draw `y` uniformly from `Y`, accept with probability 1
/// when `<y, v> = 1` and `e^-eps` otherwise. Expected `O(d e^eps)` time.
pub fn perturb_reference<R: Rng + ?Sized>(
    v: &EncodedReport,
    params: &MechanismParams,
    rng: &mut R,
) -> Result<PerturbedReport> {
    check_report_level(v, params)?;
    let accept_other = (-params.epsilon.0).exp();
    loop {
        let support: Vec<(u32, i8)> = index::sample(rng, params.d, params.m)
            .into_iter()
            .map(|pos| (pos as u32, if rng.gen::<bool>() { 1 } else { -1 }))
            .collect();
        let y = PerturbedReport::new(v.level, support)?;
        if y.inner(v) == 1 || rng.gen::<f64>() < accept_other {
            return Ok(y);
        }
    }
}

/// Draws the perturbed report in `O(m)` time (plus `O(d)` when `m` is close to
/// `d`), handing each nonzero coordinate to `emit`.
///
/// The special coordinate keeps `v`'s sign with probability `p`, flips it with
/// probability `p e^-eps` and is zeroed otherwise. The remaining `m - 1`
/// (or `m`, when zeroed) coordinates are drawn uniformly without replacement
/// from the other `d - 1` positions, each with an independent fair sign.
pub(crate) fn perturb_fast_with<R, F>(v: &EncodedReport, params: &MechanismParams, rng: &mut R, mut emit: F)
where
    R: Rng + ?Sized,
    F: FnMut(usize, i8),
{
    let special = v.position as usize;
    let u: f64 = rng.gen::<f64>() * params.denom;
    let e = params.epsilon.0.exp();
    let rest = if u < e {
        emit(special, v.sign);
        params.m - 1
    } else if params.m == params.d || u < e + 1.0 {
        emit(special, -v.sign);
        params.m - 1
    } else {
        params.m
    };
    if rest == 0 {
        return;
    }
    let mut bits = 0u64;
    let mut left = 0u32;
    let mut sign = |rng: &mut R| {
        if left == 0 {
            bits = rng.next_u64();
            left = 64;
        }
        left -= 1;
        let s = if bits & 1 == 0 { 1 } else { -1 };
        bits >>= 1;
        s
    };
    let others = params.d - 1;
    if rest == others {
        for pos in (0..params.d).filter(|&p| p != special) {
            let s = sign(rng);
            emit(pos, s);
        }
    } else {
        for i in index::sample(rng, others, rest).into_iter() {
            let pos = if i >= special { i + 1 } else { i };
            let s = sign(rng);
            emit(pos, s);
        }
    }
}

pub fn perturb_fast<R: Rng + ?Sized>(
    v: &EncodedReport,
    params: &MechanismParams,
    rng: &mut R,
) -> Result<PerturbedReport> {
    check_report_level(v, params)?;
    let mut support = Vec::with_capacity(params.m);
    perturb_fast_with(v, params, rng, |pos, s| support.push((pos as u32, s)));
    PerturbedReport::new(v.level, support)
}

fn check_output(y: &PerturbedReport, v: &EncodedReport, params: &MechanismParams) -> Result<()> {
    check_report_level(v, params)?;
    if y.level != v.level || y.sparsity() != params.m {
        return Err(Error::invalid(format!(
            "report {y} is not in the output space for d = {}, m = {}",
            params.d, params.m
        )));
    }
    Ok(())
}

/// `P(y | v)`: `e^eps / Omega` when `<y, v> = 1`, else `1 / Omega`.
pub fn output_pmf(y: &PerturbedReport, v: &EncodedReport, params: &MechanismParams) -> Result<f64> {
    check_output(y, v, params)?;
    let log = if y.inner(v) == 1 {
        params.epsilon.0 - params.log_omega
    } else {
        -params.log_omega
    };
    Ok(log.exp())
}

/// `P(y | v)` as produced by the branches of [`perturb_fast`]: the probability
/// of the special coordinate's outcome times the uniform probability of the
/// remaining signed support.
pub fn fast_sampler_pmf(y: &PerturbedReport, v: &EncodedReport, params: &MechanismParams) -> Result<f64> {
    check_output(y, v, params)?;
    let (d, m) = (params.d as u64, params.m as u64);
    let rest_count = |picked: u64| -> f64 {
        // C(d-1, picked) 2^picked signed supports among the other coordinates.
        (ln_binomial(d - 1, picked) + picked as f64 * std::f64::consts::LN_2).exp()
    };
    let e = params.epsilon.0.exp();
    Ok(match y.value_at(v.position) * v.sign {
        1 => e / params.denom / rest_count(m - 1),
        -1 => 1.0 / params.denom / rest_count(m - 1),
        _ => params.r / params.denom / rest_count(m),
    })
}

/// Every element of `Y` for `(d, m)`, in lexicographic order of positions then signs.
pub fn enumerate_outputs(params: &MechanismParams) -> Result<Vec<PerturbedReport>> {
    let size = params.output_space_size().unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let (d, m) = (params.d, params.m);
    let mut out = Vec::with_capacity(size as usize);
    let mut combo: Vec<usize> = (0..m).collect();
    loop {
        for signs in 0u32..1 << m {
            let support = combo
                .iter()
                .enumerate()
                .map(|(i, &pos)| (pos as u32, if signs >> i & 1 == 0 { 1 } else { -1 }))
                .collect();
            out.push(PerturbedReport::new(params.level(), support)?);
        }
        // Next m-combination of 0..d.
        let Some(i) = (0..m).rev().find(|&i| combo[i] < d - m + i) else {
            break;
        };
        combo[i] += 1;
        for t in i + 1..m {
            combo[t] = combo[t - 1] + 1;
        }
    }
    Ok(out)
}

/// All `2d` encoded inputs at the level of `params`.
pub fn enumerate_inputs(params: &MechanismParams) -> Vec<EncodedReport> {
    (0..params.d as u32)
        .flat_map(|position| {
            [1, -1].map(|sign| EncodedReport {
                level: params.level(),
                position,
                sign,
            })
        })
        .collect()
}

/// `max_{v, v', y} P(y | v) / P(y | v')` over the whole input and output
/// space, with probabilities taken from the sampler's branch structure.
pub fn ldp_ratio_audit(params: &MechanismParams) -> Result<f64> {
    let outputs = enumerate_outputs(params)?;
    let inputs = enumerate_inputs(params);
    let mut worst: f64 = 0.0;
    for y in &outputs {
        let probs = inputs
            .iter()
            .map(|v| fast_sampler_pmf(y, v, params))
            .collect::<Result<Vec<_>>>()?;
        let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.max(hi / lo);
    }
    Ok(worst)
}

/// `a_jk = 2^(j/2) / (n_j p (1 - e^-eps)) * sums[k]`.
pub(crate) fn coefficients_from_sums(sums: &[i64], params: &MechanismParams, n_j: usize) -> Vec<f64> {
    let scale = level_scale(params.level()) / (n_j as f64 * params.expectation_scale());
    sums.iter().map(|&s| scale * s as f64).collect()
}

/// Unbiased level-`j` coefficients from the reports of the `n_j` users assigned to it.
pub fn aggregate_level(reports: &[PerturbedReport], params: &MechanismParams, n_j: usize) -> Result<Vec<f64>> {
    if reports.is_empty() || n_j == 0 {
        return Err(Error::invalid("aggregation needs at least one report"));
    }
    if reports.len() != n_j {
        return Err(Error::invalid(format!(
            "{} reports supplied for a level of {n_j} users",
            reports.len()
        )));
    }
    let mut sums = vec![0i64; params.d];
    for y in reports {
        if y.level != params.level() {
            return Err(Error::invalid(format!(
                "report at level {} aggregated at level {}",
                y.level,
                params.level()
            )));
        }
        for &(pos, s) in &y.support {
            sums[pos as usize] += i64::from(s);
        }
    }
    Ok(coefficients_from_sums(&sums, params, n_j))
}

/// Total variance `sum_k Var[a_jk]` of one level's estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelVariance {
    /// Exact, given which users were assigned to the level:
    /// `(2^j / n_j) [(1 + e^-eps)/(p c) - 1 + 2 q (d-1)/(p^2 c)]`, `c = (1 - e^-eps)^2`.
    pub conditional: f64,
    /// Upper bound including the randomness of the assignment:
    /// `(2^j / n_j) [(1 + e^-eps)/(p c) + 2 q (d-1)/(p^2 c)]`.
    pub bound: f64,
}

pub fn level_variance(params: &MechanismParams, n_j: usize) -> Result<LevelVariance> {
    if n_j == 0 {
        return Err(Error::invalid("level variance needs n_j >= 1"));
    }
    let factor = variance_factor(params.d, params.m, params.epsilon);
    let scale = params.d as f64 / n_j as f64;
    Ok(LevelVariance {
        conditional: scale * (factor - 1.0),
        bound: scale * factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::collections::HashMap;

    fn eps(e: f64) -> PrivacyBudget {
        PrivacyBudget::new(e).unwrap()
    }

    /// p, q and Omega by brute-force enumeration of Y with unnormalized weights.
    fn enumerated_pq(d: usize, m: usize, e: f64) -> (f64, f64, f64) {
        let params = derive_params(d, m, eps(e)).unwrap();
        let v = EncodedReport::new(params.level(), 0, 1).unwrap();
        let (mut omega, mut p_mass, mut q_mass) = (0.0, 0.0, 0.0);
        for y in enumerate_outputs(&params).unwrap() {
            let w = if y.inner(&v) == 1 { e.exp() } else { 1.0 };
            omega += w;
            if y.value_at(0) == 1 {
                p_mass += w;
            }
            if d > 1 && y.value_at(1) == 1 {
                q_mass += w;
            }
        }
        (p_mass / omega, q_mass / omega, omega)
    }

    /// p and q straight from the binomial expressions, in u128 arithmetic.
    fn binomial_pq(d: u64, m: u64, e: f64) -> (f64, f64) {
        let c = |n: u64, k: u64| binomial_u128(n, k).unwrap() as f64;
        let pow2 = |k: u64| 2f64.powi(k as i32);
        let a = c(d - 1, m - 1) * pow2(m - 1);
        let omega = a * e.exp() + a + c(d - 1, m) * pow2(m);
        let p = a * e.exp() / omega;
        let q = if m == 1 {
            1.0 / omega
        } else {
            (c(d - 2, m - 2) * pow2(m - 2) * (e.exp() + 1.0) + c(d - 2, m - 1) * pow2(m - 1)) / omega
        };
        (p, q)
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0).is_err());
        assert!(PrivacyBudget::new(-1.0).is_err());
        assert!(PrivacyBudget::new(f64::INFINITY).is_err());
        assert!(PrivacyBudget::new(f64::NAN).is_err());
        assert_eq!(PrivacyBudget::new(0.5).unwrap().epsilon(), 0.5);
    }

    #[test]
    fn params_for_two_dimensions_ln3() {
        let params = derive_params(2, 1, eps(3f64.ln())).unwrap();
        assert!((params.log_omega().exp() - 6.0).abs() < 1e-12);
        assert!((params.p() - 0.5).abs() < 1e-12);
        assert!((params.q() - 1.0 / 6.0).abs() < 1e-12);
        let (p, q, omega) = enumerated_pq(2, 1, 3f64.ln());
        assert!((omega - 6.0).abs() < 1e-12);
        assert!((p - 0.5).abs() < 1e-12 && (q - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn params_match_enumeration() {
        for d in [1usize, 2, 4, 8] {
            for m in 1..=d {
                for e in [0.3, 1.0, 2.5] {
                    let params = derive_params(d, m, eps(e)).unwrap();
                    let (p, q, omega) = enumerated_pq(d, m, e);
                    assert!((params.p() - p).abs() < 1e-12, "d={d} m={m} e={e}");
                    if d > 1 {
                        assert!((params.q() - q).abs() < 1e-12, "d={d} m={m} e={e}");
                    }
                    assert!((params.log_omega() - omega.ln()).abs() < 1e-12);
                    assert!(params.p() * (1.0 + (-e).exp()) <= 1.0 + 1e-15);
                }
            }
        }
    }

    #[test]
    fn full_subset_limit() {
        for d in [2usize, 16, 1024] {
            let params = derive_params(d, d, eps(0.7)).unwrap();
            let e = 0.7f64.exp();
            assert!((params.p() - e / (e + 1.0)).abs() < 1e-15);
            assert!((params.q() - 0.5).abs() < 1e-15);
            assert_eq!(params.zero_prob(), 0.0);
        }
    }

    #[test]
    fn ratio_form_matches_binomials() {
        let (p, q) = binomial_pq(8, 3, 1.0);
        let params = derive_params(8, 3, eps(1.0)).unwrap();
        assert!((params.p() - p).abs() < 1e-12);
        assert!((params.q() - q).abs() < 1e-12);
        for d in [2u64, 4, 32, 64] {
            for m in 1..=d {
                let (p, q) = binomial_pq(d, m, 0.9);
                let params = derive_params(d as usize, m as usize, eps(0.9)).unwrap();
                assert!((params.p() - p).abs() <= 1e-12 * p);
                assert!((params.q() - q).abs() <= 1e-12 * q);
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(derive_params(3, 1, eps(1.0)).is_err());
        assert!(derive_params(4, 0, eps(1.0)).is_err());
        assert!(derive_params(4, 5, eps(1.0)).is_err());
        assert!(derive_params(0, 1, eps(1.0)).is_err());
    }

    fn brute_force_m(d: u64, e: f64) -> usize {
        let em = (-e).exp();
        let c = (1.0 - em).powi(2);
        let mut best = (0, f64::INFINITY);
        for m in 1..=d {
            let (p, q) = binomial_pq(d, m, e);
            let obj = (1.0 + em) / (p * c) + 2.0 * q * (d as f64 - 1.0) / (p * p * c);
            if obj < best.1 {
                best = (m as usize, obj);
            }
        }
        best.0
    }

    #[test]
    fn optimal_m_examples() {
        assert_eq!(optimal_m(1, eps(1.0)), 1);
        assert_eq!(optimal_m(16, eps(10.0)), 1);
        assert_eq!(optimal_m(16, eps(10.0)), brute_force_m(16, 10.0));
        let small = optimal_m(16, eps(0.25));
        assert_eq!(small, brute_force_m(16, 0.25));
        assert_eq!(small, 16);
        for d in [2u64, 8, 32, 64] {
            for e in [0.5, 1.0, 2.0, 4.0] {
                assert_eq!(optimal_m(d as usize, eps(e)), brute_force_m(d, e), "d={d} e={e}");
            }
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(0.3, 1).unwrap(), EncodedReport::new(1, 0, -1).unwrap());
        assert_eq!(encode(0.0, 3).unwrap(), EncodedReport::new(3, 0, 1).unwrap());
        assert_eq!(encode(1.0, 2).unwrap(), EncodedReport::new(2, 3, -1).unwrap());
        assert!(encode(1.2, 2).is_err());
        assert!(encode(-0.1, 2).is_err());
    }

    #[test]
    fn encode_is_scaled_wavelet_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x: f64 = rng.gen();
            for j in 0..6 {
                let v = encode(x, j).unwrap().to_dense();
                for (k, &vk) in v.iter().enumerate() {
                    let psi = haar::eval_psi(haar::HaarIndex::new(j, k as u32).unwrap(), x).unwrap();
                    assert_eq!(f64::from(vk), psi / level_scale(j));
                }
            }
        }
    }

    #[test]
    fn report_wire_form() {
        let y: PerturbedReport = "3:5-,0+".parse().unwrap();
        assert_eq!(y.support(), &[(0, 1), (5, -1)]);
        assert_eq!(y.to_string(), "3:0+,5-");
        assert!("3:0+,0-".parse::<PerturbedReport>().is_err());
        assert!("3:8+".parse::<PerturbedReport>().is_err());
        assert!("3:1".parse::<PerturbedReport>().is_err());
        assert!("x:1+".parse::<PerturbedReport>().is_err());
        assert!("2".parse::<PerturbedReport>().is_err());
    }

    proptest! {
        #[test]
        fn wire_form_round_trips(level in 0u32..10, seed in any::<u64>(), m_frac in 0.0f64..1.0) {
            let d = 1usize << level;
            let m = 1 + ((d - 1) as f64 * m_frac) as usize;
            let params = derive_params(d, m, eps(1.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = encode(rng.gen(), level).unwrap();
            let y = perturb_fast(&v, &params, &mut rng).unwrap();
            prop_assert_eq!(y.sparsity(), m);
            let back: PerturbedReport = y.to_string().parse().unwrap();
            prop_assert_eq!(back, y);
        }
    }

    #[test]
    fn sampler_pmf_equals_closed_form() {
        for d in [1usize, 2, 4, 8] {
            for m in 1..=d.min(4) {
                for e in [2f64.ln(), 0.5, 3.0] {
                    let params = derive_params(d, m, eps(e)).unwrap();
                    for v in enumerate_inputs(&params) {
                        let mut total = 0.0;
                        for y in enumerate_outputs(&params).unwrap() {
                            let a = output_pmf(&y, &v, &params).unwrap();
                            let b = fast_sampler_pmf(&y, &v, &params).unwrap();
                            assert!((a - b).abs() <= 1e-14 * a.max(b), "d={d} m={m}");
                            total += b;
                        }
                        assert!((total - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn audit_examples() {
        let audit = ldp_ratio_audit(&derive_params(2, 1, eps(1.0)).unwrap()).unwrap();
        assert!((audit - 1f64.exp()).abs() < 1e-12);
        let audit = ldp_ratio_audit(&derive_params(4, 2, eps(0.5)).unwrap()).unwrap();
        assert!((audit - 0.5f64.exp()).abs() < 1e-12);
        // Same input on both sides.
        let params = derive_params(4, 2, eps(0.5)).unwrap();
        let v = EncodedReport::new(2, 1, -1).unwrap();
        for y in enumerate_outputs(&params).unwrap() {
            let a = fast_sampler_pmf(&y, &v, &params).unwrap();
            assert_eq!(a / a, 1.0);
        }
        assert!(matches!(
            ldp_ratio_audit(&derive_params(1024, 512, eps(1.0)).unwrap()),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn enumeration_sizes() {
        for (d, m) in [(1usize, 1usize), (2, 1), (2, 2), (4, 2), (8, 3)] {
            let params = derive_params(d, m, eps(1.0)).unwrap();
            let outputs = enumerate_outputs(&params).unwrap();
            assert_eq!(outputs.len() as u128, params.output_space_size().unwrap());
            let distinct: std::collections::HashSet<_> = outputs.iter().collect();
            assert_eq!(distinct.len(), outputs.len());
        }
    }

    fn chi2_critical(df: usize, level: f64) -> f64 {
        ChiSquared::new(df as f64).unwrap().inverse_cdf(level)
    }

    #[test]
    fn reference_sampler_single_coordinate() {
        let e = 1.3;
        let params = derive_params(1, 1, eps(e)).unwrap();
        let v = EncodedReport::new(0, 0, -1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        let kept = (0..draws)
            .filter(|_| perturb_reference(&v, &params, &mut rng).unwrap().value_at(0) == -1)
            .count() as f64
            / draws as f64;
        let expect = e.exp() / (e.exp() + 1.0);
        let se = (expect * (1.0 - expect) / draws as f64).sqrt();
        assert!((kept - expect).abs() < 4.0 * se);
    }

    #[test]
    fn reference_sampler_high_budget() {
        let params = derive_params(2, 1, eps(20.0)).unwrap();
        let v = EncodedReport::new(1, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let hits = (0..10_000)
            .filter(|_| perturb_reference(&v, &params, &mut rng).unwrap().inner(&v) == 1)
            .count();
        assert!(hits as f64 / 1e4 >= 0.999);
    }

    fn goodness_of_fit<F>(params: &MechanismParams, v: &EncodedReport, draws: usize, mut sample: F) -> (f64, usize)
    where
        F: FnMut() -> PerturbedReport,
    {
        let outputs = enumerate_outputs(params).unwrap();
        let mut counts: HashMap<PerturbedReport, usize> = HashMap::new();
        for _ in 0..draws {
            *counts.entry(sample()).or_default() += 1;
        }
        let stat = outputs
            .iter()
            .map(|y| {
                let expected = draws as f64 * output_pmf(y, v, params).unwrap();
                let observed = *counts.get(y).unwrap_or(&0) as f64;
                (observed - expected).powi(2) / expected
            })
            .sum();
        (stat, outputs.len() - 1)
    }

    #[test]
    fn reference_sampler_matches_pmf() {
        let params = derive_params(2, 1, eps(2f64.ln())).unwrap();
        let v = EncodedReport::new(1, 0, 1).unwrap();
        // Omega = e^eps + 2d - 1 = 5.
        assert!((params.log_omega().exp() - 5.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (stat, df) = goodness_of_fit(&params, &v, 100_000, || perturb_reference(&v, &params, &mut rng).unwrap());
        assert!(stat < chi2_critical(df, 0.999), "chi2 = {stat}");
    }

    #[test]
    fn fast_sampler_matches_pmf() {
        for (d, m, e) in [(1usize, 1usize, 0.8), (2, 1, 2f64.ln()), (4, 2, 1.0), (8, 3, 2.0), (8, 8, 0.5)] {
            let params = derive_params(d, m, eps(e)).unwrap();
            let v = EncodedReport::new(params.level(), (d / 2) as u32, -1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(24 + d as u64);
            let draws = 200_000;
            let (stat, df) = goodness_of_fit(&params, &v, draws, || perturb_fast(&v, &params, &mut rng).unwrap());
            if df > 0 {
                assert!(stat < chi2_critical(df, 0.999), "d={d} m={m}: chi2 = {stat}");
            }
        }
    }

    #[test]
    fn fast_sampler_is_reproducible() {
        let params = derive_params(64, 9, eps(1.5)).unwrap();
        let v = EncodedReport::new(6, 17, 1).unwrap();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..50).map(|_| perturb_fast(&v, &params, &mut rng).unwrap()).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for y in a {
            assert_eq!(y, perturb_fast(&v, &params, &mut rng).unwrap());
        }
        let wrong = EncodedReport::new(5, 1, 1).unwrap();
        assert!(perturb_fast(&wrong, &params, &mut rng).is_err());
    }

    #[test]
    fn expectation_identity() {
        let params = derive_params(8, 3, eps(1.0)).unwrap();
        let v = EncodedReport::new(3, 2, -1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let draws = 400_000;
        let mut sums = [0i64; 8];
        for _ in 0..draws {
            perturb_fast_with(&v, &params, &mut rng, |pos, s| sums[pos] += i64::from(s));
        }
        let scale = params.expectation_scale();
        assert!((scale - params.p() * (1.0 - (-1f64).exp())).abs() < 1e-15);
        for (k, &s) in sums.iter().enumerate() {
            let mean = s as f64 / draws as f64;
            let expected = if k == 2 { -scale } else { 0.0 };
            // Each coordinate is a {-1, 0, 1} variable, so its sd is at most 1.
            assert!((mean - expected).abs() < 4.0 / (draws as f64).sqrt(), "k={k}");
        }
    }

    #[test]
    fn aggregate_examples() {
        // d = 1: p = e^eps / (e^eps + 1) = 3/4, so a_00 = 1 / (3/4 * 2/3).
        let params = derive_params(1, 1, eps(3f64.ln())).unwrap();
        let y: PerturbedReport = "0:0+".parse().unwrap();
        let a = aggregate_level(&[y], &params, 1).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-12);

        // d = 2, m = 1: p = 1/2, so a_10 = sqrt(2) / (1/2 * 2/3).
        let params = derive_params(2, 1, eps(3f64.ln())).unwrap();
        let y: PerturbedReport = "1:0+".parse().unwrap();
        let a = aggregate_level(&[y], &params, 1).unwrap();
        assert!((a[0] - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(a[1], 0.0);

        let params = derive_params(4, 2, eps(1.0)).unwrap();
        let reports: Vec<PerturbedReport> = ["2:0+,1-", "2:0-,1+"].iter().map(|s| s.parse().unwrap()).collect();
        let a = aggregate_level(&reports, &params, 2).unwrap();
        assert_eq!(a, vec![0.0; 4]);

        assert!(aggregate_level(&[], &params, 0).is_err());
        assert!(aggregate_level(&reports, &params, 3).is_err());
        let other: PerturbedReport = "1:0+,1-".parse().unwrap();
        assert!(aggregate_level(&[other], &params, 1).is_err());
    }

    #[test]
    fn aggregate_is_unbiased_for_a_point_mass() {
        let params = derive_params(1, 1, eps(1.0)).unwrap();
        let v = encode(0.2, 0).unwrap();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let reports: Vec<_> = (0..n).map(|_| perturb_fast(&v, &params, &mut rng).unwrap()).collect();
        let a = aggregate_level(&reports, &params, n).unwrap()[0];
        let se = level_variance(&params, n).unwrap().conditional.sqrt();
        assert!((a - 1.0).abs() < 3.0 * se, "a = {a}, se = {se}");
    }

    #[test]
    fn variance_single_coordinate() {
        let e = 0.9;
        let params = derive_params(1, 1, eps(e)).unwrap();
        let var = level_variance(&params, 10).unwrap();
        let p = params.p();
        let em = (-e as f64).exp();
        let expected = ((1.0 + em) / (p * (1.0 - em).powi(2)) - 1.0) / 10.0;
        assert!((var.conditional - expected).abs() < 1e-12);
        assert!((var.bound - var.conditional - 0.1).abs() < 1e-12);
        assert!(level_variance(&params, 0).is_err());
    }

    #[test]
    fn variance_matches_monte_carlo() {
        let params = derive_params(2, 1, eps(3f64.ln())).unwrap();
        let n = 100_000;
        let reps = 10_000;
        // Half the users on each coordinate, alternating signs.
        let users: Vec<_> = (0..n)
            .map(|i| EncodedReport::new(1, (i % 2) as u32, if i % 4 < 2 { 1 } else { -1 }).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut first = [0.0f64; 2];
        let mut second = [0.0f64; 2];
        for _ in 0..reps {
            let mut sums = [0i64; 2];
            for v in &users {
                perturb_fast_with(v, &params, &mut rng, |pos, s| sums[pos] += i64::from(s));
            }
            for (k, a) in coefficients_from_sums(&sums, &params, n).into_iter().enumerate() {
                first[k] += a;
                second[k] += a * a;
            }
        }
        let total: f64 = (0..2)
            .map(|k| {
                let mean = first[k] / reps as f64;
                (second[k] - reps as f64 * mean * mean) / (reps as f64 - 1.0)
            })
            .sum();
        let formula = level_variance(&params, n).unwrap().conditional;
        assert!((total / formula - 1.0).abs() < 0.05, "empirical {total} vs {formula}");
    }

    #[test]
    fn level_constant_falls_with_budget() {
        assert!(level_constant(4, eps(0.5)) > level_constant(4, eps(2.0)));
        for j in 0..8 {
            assert!(level_constant(j, eps(0.5)) > level_constant(j, eps(1.0)));
        }
        let d = 16;
        let v = level_constant(4, eps(0.5));
        assert!((v - d as f64 * variance_factor(d, optimal_m(d, eps(0.5)), eps(0.5))).abs() < 1e-9);
    }
}
