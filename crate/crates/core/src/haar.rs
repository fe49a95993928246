//! Haar wavelet machinery on the unit interval.
//!
//! Level `j` has `2^j` wavelets `psi_jk(x) = 2^(j/2) psi(2^j x - k)`, each
//! supported on `[k 2^-j, (k+1) 2^-j)`: `+2^(j/2)` on the left half and
//! `-2^(j/2)` on the right half. Intervals are half-open on the right, with the
//! single exception that `x = 1` belongs to the last interval of every level.
//!
//! A level-`J` expansion `1 + sum a_jk psi_jk` is piecewise constant on the
//! `2^(J+1)` dyadic bins of width `2^-(J+1)`, so the density is stored as that
//! vector of bin heights and the coefficient tree is converted to it exactly.

use crate::error::{Error, Result};

/// Largest expansion level accepted anywhere in the crate.
pub const MAX_LEVEL: u32 = 20;

/// Index `(j, k)` of a Haar wavelet with `0 <= k < 2^j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HaarIndex {
    level: u32,
    shift: u32,
}

impl HaarIndex {
    pub fn new(level: u32, shift: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::invalid(format!(
                "level {level} exceeds the maximum of {MAX_LEVEL}"
            )));
        }
        if u64::from(shift) >= 1u64 << level {
            return Err(Error::invalid(format!(
                "shift {shift} out of range for level {level}"
            )));
        }
        Ok(HaarIndex { level, shift })
    }

    pub fn level(self) -> u32 {
        self.level
    }

    pub fn shift(self) -> u32 {
        self.shift
    }
}

/// `2^(j/2)`, the magnitude of every nonzero value of a level-`j` wavelet.
#[inline]
pub fn level_scale(level: u32) -> f64 {
    let half = f64::from(1u32 << (level / 2));
    if level % 2 == 0 {
        half
    } else {
        half * std::f64::consts::SQRT_2
    }
}

pub(crate) fn check_unit(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain { value: x })
    }
}

/// Index of the half-open dyadic bin of width `2^-bits_level` holding `x`, with
/// `x = 1` folded into the last bin. `x` must already be checked to be in `[0, 1]`.
#[inline]
pub(crate) fn dyadic_bin(x: f64, bits_level: u32) -> usize {
    let bins = 1usize << bits_level;
    // Scaling by a power of two is exact, so the floor is exact too.
    let b = (x * bins as f64) as usize;
    b.min(bins - 1)
}

/// The unique wavelet of level `j` that is nonzero at `x`, as `(k, sign)`.
#[inline]
pub(crate) fn locate(x: f64, level: u32) -> (usize, i8) {
    let fine = dyadic_bin(x, level + 1);
    let sign = if fine & 1 == 0 { 1 } else { -1 };
    (fine >> 1, sign)
}

pub fn eval_psi(idx: HaarIndex, x: f64) -> Result<f64> {
    check_unit(x)?;
    let (k, sign) = locate(x, idx.level);
    if k == idx.shift as usize {
        Ok(f64::from(sign) * level_scale(idx.level))
    } else {
        Ok(0.0)
    }
}

/// Coefficients `a_jk` of a level-`J` Haar expansion, for every `j <= J`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTree {
    levels: Vec<Vec<f64>>,
}

impl CoefficientTree {
    pub fn zeros(max_level: u32) -> Result<Self> {
        check_level(max_level)?;
        Ok(CoefficientTree {
            levels: (0..=max_level).map(|j| vec![0.0; 1 << j]).collect(),
        })
    }

    /// Builds a tree from per-level coefficient vectors; level `j` must hold `2^j` values.
    pub fn from_levels(levels: Vec<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("coefficient tree needs at least level 0"));
        }
        check_level((levels.len() - 1) as u32)?;
        for (j, level) in levels.iter().enumerate() {
            if level.len() != 1 << j {
                return Err(Error::invalid(format!(
                    "level {j} holds {} coefficients, expected {}",
                    level.len(),
                    1usize << j
                )));
            }
        }
        Ok(CoefficientTree { levels })
    }

    pub fn max_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    /// Number of coefficients, `2^(J+1) - 1`.
    pub fn len(&self) -> usize {
        (1 << self.levels.len()) - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, idx: HaarIndex) -> Option<f64> {
        self.levels
            .get(idx.level as usize)
            .map(|l| l[idx.shift as usize])
    }

    pub fn set(&mut self, idx: HaarIndex, value: f64) -> Result<()> {
        let max = self.max_level();
        let slot = self
            .levels
            .get_mut(idx.level as usize)
            .ok_or_else(|| Error::invalid(format!("level {} beyond tree depth {max}", idx.level)))?;
        slot[idx.shift as usize] = value;
        Ok(())
    }

    pub fn level(&self, j: u32) -> &[f64] {
        &self.levels[j as usize]
    }

    pub fn level_mut(&mut self, j: u32) -> &mut [f64] {
        &mut self.levels[j as usize]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn iter(&self) -> impl Iterator<Item = (HaarIndex, f64)> + '_ {
        self.levels.iter().enumerate().flat_map(|(j, l)| {
            l.iter().enumerate().map(move |(k, &a)| {
                (
                    HaarIndex {
                        level: j as u32,
                        shift: k as u32,
                    },
                    a,
                )
            })
        })
    }
}

fn check_level(level: u32) -> Result<()> {
    if level > MAX_LEVEL {
        Err(Error::invalid(format!(
            "expansion level {level} exceeds the maximum of {MAX_LEVEL}"
        )))
    } else {
        Ok(())
    }
}

/// Empirical Haar coefficients `a*_jk = (1/n) sum_i psi_jk(X_i)` for all `j <= J`.
///
/// Samples are histogrammed on the finest dyadic grid with integer counts, so
/// each coefficient is a single rounding of an exact count difference.
pub fn exact_coefficients(samples: &[f64], max_level: u32) -> Result<CoefficientTree> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    check_level(max_level)?;
    let fine = max_level + 1;
    let mut counts = vec![0u64; 1 << fine];
    for &x in samples {
        check_unit(x)?;
        counts[dyadic_bin(x, fine)] += 1;
    }
    let mut prefix = Vec::with_capacity(counts.len() + 1);
    prefix.push(0u64);
    let mut acc = 0u64;
    for c in &counts {
        acc += c;
        prefix.push(acc);
    }
    let n = samples.len() as f64;
    let levels = (0..=max_level)
        .map(|j| {
            let width = 1usize << (fine - j);
            let half = width / 2;
            let scale = level_scale(j) / n;
            (0..1usize << j)
                .map(|k| {
                    let lo = k * width;
                    let plus = prefix[lo + half] - prefix[lo];
                    let minus = prefix[lo + width] - prefix[lo + half];
                    scale * (plus as f64 - minus as f64)
                })
                .collect()
        })
        .collect();
    Ok(CoefficientTree { levels })
}

/// A density on `[0, 1]` that is constant on `2^(J+1)` equal-width bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePdf {
    heights: Vec<f64>,
}

impl PiecewisePdf {
    pub fn new(heights: Vec<f64>) -> Result<Self> {
        if heights.len() < 2 || !heights.len().is_power_of_two() {
            return Err(Error::invalid(format!(
                "bin count {} is not a power of two >= 2",
                heights.len()
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::invalid("non-finite bin height"));
        }
        Ok(PiecewisePdf { heights })
    }

    pub fn uniform(max_level: u32) -> Result<Self> {
        check_level(max_level)?;
        Ok(PiecewisePdf {
            heights: vec![1.0; 1 << (max_level + 1)],
        })
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn into_heights(self) -> Vec<f64> {
        self.heights
    }

    pub fn bins(&self) -> usize {
        self.heights.len()
    }

    /// `J` such that the pdf has `2^(J+1)` bins.
    pub fn max_level(&self) -> u32 {
        self.heights.len().trailing_zeros() - 1
    }

    pub fn integral(&self) -> f64 {
        neumaier_sum(self.heights.iter().copied()) / self.heights.len() as f64
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Non-negative and integrating to one within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.min_height() >= 0.0 && (self.integral() - 1.0).abs() <= tol
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        check_unit(x)?;
        Ok(self.heights[dyadic_bin(x, self.heights.len().trailing_zeros())])
    }
}

/// `f_J = 1 + sum_{j<=J} sum_k a_jk psi_jk` as bin heights on the `2^(J+1)` grid.
pub fn reconstruct_pdf(tree: &CoefficientTree) -> PiecewisePdf {
    let mut heights = vec![1.0];
    for (j, level) in tree.levels.iter().enumerate() {
        let scale = level_scale(j as u32);
        heights = heights
            .iter()
            .zip(level)
            .flat_map(|(&h, &a)| {
                let s = a * scale;
                [h + s, h - s]
            })
            .collect();
    }
    PiecewisePdf { heights }
}

/// Inverse of [`reconstruct_pdf`]: the coefficients whose expansion has these bin heights.
///
/// Heights are taken as given; their mean is assumed to be one.
pub fn coefficients_of(pdf: &PiecewisePdf) -> CoefficientTree {
    let max_level = pdf.max_level();
    // Pairwise means climb from the finest bins up; the difference of the two
    // children of a node is 2 * a_jk * 2^(j/2).
    let mut levels = vec![Vec::new(); max_level as usize + 1];
    let mut cur = pdf.heights.clone();
    for j in (0..=max_level).rev() {
        let scale = level_scale(j);
        levels[j as usize] = cur
            .chunks_exact(2)
            .map(|p| (p[0] - p[1]) / (2.0 * scale))
            .collect();
        cur = cur.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    }
    CoefficientTree { levels }
}

/// Cdf sampled at `i/G`, `i = 0..=G`, with linear interpolation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCdf {
    knots: Vec<f64>,
    monotone: bool,
}

impl StepCdf {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("a cdf needs at least two knots"));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::invalid("non-finite cdf knot"));
        }
        let monotone = knots.windows(2).all(|w| w[0] <= w[1]);
        Ok(StepCdf { knots, monotone })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn grid(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    /// Linear interpolation between knots; arguments are clamped to `[0, 1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let g = self.grid();
        let pos = x.clamp(0.0, 1.0) * g as f64;
        let i = (pos.floor() as usize).min(g - 1);
        let t = pos - i as f64;
        self.knots[i] + t * (self.knots[i + 1] - self.knots[i])
    }
}

/// Exact integral of a piecewise-constant pdf at the points `i/G`.
pub fn cdf_of(pdf: &PiecewisePdf, grid: usize) -> Result<StepCdf> {
    if grid == 0 {
        return Err(Error::invalid("cdf grid size must be at least 1"));
    }
    let bins = pdf.heights.len();
    let width = 1.0 / bins as f64;
    let mut cum = Vec::with_capacity(bins + 1);
    cum.push(0.0);
    let mut acc = Neumaier::default();
    for &h in &pdf.heights {
        acc.add(h * width);
        cum.push(acc.total());
    }
    let knots = (0..=grid)
        .map(|i| {
            // Position i*bins/grid split into whole bins and a remainder, in integers.
            let num = i as u128 * bins as u128;
            let b = (num / grid as u128) as usize;
            let rem = (num % grid as u128) as f64 / grid as f64;
            if b >= bins {
                cum[bins]
            } else {
                cum[b] + pdf.heights[b] * rem * width
            }
        })
        .collect();
    StepCdf::new(knots)
}

#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Neumaier::default();
    for x in xs {
        acc.add(x);
    }
    acc.total()
}
