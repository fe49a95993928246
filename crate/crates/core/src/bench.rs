//! Seeded, repeated experiments comparing the wavelet estimator with binning baselines.
//!
//! A spec names one dataset, a set of methods, a list of privacy budgets and
//! a repetition count. Every trial gets its own seed derived from the master
//! seed, the method label, the budget and the trial index, so adding a method
//! never changes the draws of another, and results do not depend on how trials
//! are scheduled across threads.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::baselines::{binned_cdf, binning_estimate};
use crate::datagen::{self, Dataset, IngestOptions};
use crate::error::{Error, Result};
use crate::estimator::{compute_bound, estimate, EstimatorConfig};
use crate::haar::{self, cdf_of, StepCdf};
use crate::mechanism::PrivacyBudget;
use crate::metrics::{self, Empirical, DEFAULT_GRID};
use crate::seed::{derive_seed, label_tag, rng_for, tags};

pub const DEFAULT_REPS: usize = 100;
pub const DEFAULT_RANGE_QUERIES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Beta { n: usize, a: u32, b: u32 },
    SquareWave { n: usize, h: f64 },
    Uniform { n: usize },
    File { path: PathBuf, options: IngestOptions },
}

impl DatasetSpec {
    /// Generates or reads the data; synthetic draws are keyed by `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let mut rng = rng_for(seed, &[tags::DATA]);
        match self {
            DatasetSpec::Beta { n, a, b } => datagen::gen_beta(*n, *a, *b, &mut rng),
            DatasetSpec::SquareWave { n, h } => datagen::gen_squarewave(*n, *h, &mut rng),
            DatasetSpec::Uniform { n } => datagen::gen_uniform(*n, &mut rng),
            DatasetSpec::File { path, options } => Ok(datagen::ingest(path, *options)?.dataset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Wavelet,
    /// Equal-width histogram with this many bins.
    Binning(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Wavelet => f.write_str("wavelet"),
            Method::Binning(d) => write!(f, "binning-{d}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "wavelet" {
            return Ok(Method::Wavelet);
        }
        let bad = || Error::Config(format!("unknown method {s:?}; expected wavelet or binning-<d>"));
        let d: usize = s.strip_prefix("binning-").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if d < 2 {
            return Err(Error::Config(format!("binning needs at least 2 bins, got {d}")));
        }
        Ok(Method::Binning(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Wasserstein,
    Ks,
    /// Mean absolute error of range queries of this width.
    RangeQuery(f64),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Wasserstein => f.write_str("wasserstein"),
            Metric::Ks => f.write_str("ks"),
            Metric::RangeQuery(alpha) => write!(f, "rq-mae({alpha})"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wasserstein" => Ok(Metric::Wasserstein),
            "ks" => Ok(Metric::Ks),
            _ => {
                let bad = || Error::Config(format!("unknown metric {s:?}; expected wasserstein, ks or rq-mae(<alpha>)"));
                let alpha: f64 = s
                    .strip_prefix("rq-mae(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?
                    .parse()
                    .map_err(|_| bad())?;
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Config(format!("range width must lie in (0, 1), got {alpha}")));
                }
                Ok(Metric::RangeQuery(alpha))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelMode {
    Auto,
    Fixed(u32),
    /// Inclusive range of levels, used by [`jsweep`].
    Sweep(u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub epsilons: Vec<PrivacyBudget>,
    pub reps: usize,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    pub grid: usize,
    pub level: LevelMode,
    pub postprocess: bool,
    /// Random intervals per trial for range-query metrics.
    pub range_queries: usize,
    /// Fill the `ms` column with measured compute time. Off by default so
    /// output files are reproducible byte for byte.
    pub timing: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawLevel {
    Fixed(u32),
    Named(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    dataset: String,
    n: Option<usize>,
    a: Option<u32>,
    b: Option<u32>,
    h: Option<f64>,
    path: Option<PathBuf>,
    min: Option<f64>,
    max: Option<f64>,
    below: Option<f64>,
    methods: Vec<String>,
    epsilons: Vec<f64>,
    reps: Option<usize>,
    metrics: Option<Vec<String>>,
    seed: Option<u64>,
    grid: Option<usize>,
    level: Option<RawLevel>,
    levels: Option<[u32; 2]>,
    postprocess: Option<bool>,
    range_queries: Option<usize>,
    timing: Option<bool>,
}

impl ExperimentSpec {
    /// A spec with default repetitions, metrics (Wasserstein and KS), grid and level.
    pub fn new(dataset: DatasetSpec, methods: Vec<Method>, epsilons: Vec<PrivacyBudget>) -> Self {
        ExperimentSpec {
            dataset,
            methods,
            epsilons,
            reps: DEFAULT_REPS,
            metrics: vec![Metric::Wasserstein, Metric::Ks],
            seed: 0,
            grid: DEFAULT_GRID,
            level: LevelMode::Auto,
            postprocess: true,
            range_queries: DEFAULT_RANGE_QUERIES,
            timing: false,
        }
    }

    /// Parses the flat key/value config format; relative file paths resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let n = || raw.n.ok_or_else(|| Error::Config(format!("dataset {:?} needs n", raw.dataset)));
        let dataset = match raw.dataset.as_str() {
            "beta" => DatasetSpec::Beta {
                n: n()?,
                a: raw.a.unwrap_or(5),
                b: raw.b.unwrap_or(2),
            },
            "squarewave" => DatasetSpec::SquareWave {
                n: n()?,
                h: raw.h.ok_or_else(|| Error::Config("squarewave needs h".into()))?,
            },
            "uniform" => DatasetSpec::Uniform { n: n()? },
            "file" => {
                let path = raw.path.clone().ok_or_else(|| Error::Config("file dataset needs path".into()))?;
                let path = match base {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path,
                };
                DatasetSpec::File {
                    path,
                    options: IngestOptions {
                        min: raw.min,
                        max: raw.max,
                        below: raw.below,
                    },
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset {other:?}; expected beta, squarewave, uniform or file"
                )))
            }
        };
        let methods = raw.methods.iter().map(|m| m.parse()).collect::<Result<Vec<_>>>()?;
        let epsilons = raw
            .epsilons
            .iter()
            .map(|&e| PrivacyBudget::new(e).map_err(|err| Error::Config(err.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let metrics = match &raw.metrics {
            Some(names) => names.iter().map(|m| m.parse()).collect::<Result<Vec<_>>>()?,
            None => vec![Metric::Wasserstein, Metric::Ks],
        };
        let level = match (&raw.level, raw.levels) {
            (Some(_), Some(_)) => return Err(Error::Config("give either level or levels, not both".into())),
            (_, Some([lo, hi])) => LevelMode::Sweep(lo, hi),
            (None, None) => LevelMode::Auto,
            (Some(RawLevel::Fixed(j)), None) => LevelMode::Fixed(*j),
            (Some(RawLevel::Named(s)), None) if s == "auto" => LevelMode::Auto,
            (Some(RawLevel::Named(s)), None) => {
                return Err(Error::Config(format!("level must be \"auto\" or an integer, got {s:?}")))
            }
        };
        let spec = ExperimentSpec {
            dataset,
            methods,
            epsilons,
            reps: raw.reps.unwrap_or(DEFAULT_REPS),
            metrics,
            seed: raw.seed.unwrap_or(0),
            grid: raw.grid.unwrap_or(DEFAULT_GRID),
            level,
            postprocess: raw.postprocess.unwrap_or(true),
            range_queries: raw.range_queries.unwrap_or(DEFAULT_RANGE_QUERIES),
            timing: raw.timing.unwrap_or(false),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if self.epsilons.is_empty() {
            return fail("at least one epsilon is required".into());
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if self.metrics.is_empty() {
            return fail("at least one metric is required".into());
        }
        if self.grid == 0 {
            return fail("grid must be at least 1".into());
        }
        if self.range_queries == 0 && self.metrics.iter().any(|m| matches!(m, Metric::RangeQuery(_))) {
            return fail("range_queries must be at least 1".into());
        }
        match self.level {
            LevelMode::Fixed(j) if j > haar::MAX_LEVEL => fail(format!("level {j} exceeds {}", haar::MAX_LEVEL)),
            LevelMode::Sweep(lo, hi) if lo > hi || hi > haar::MAX_LEVEL => {
                fail(format!("level range {lo}..={hi} is empty or exceeds {}", haar::MAX_LEVEL))
            }
            _ => Ok(()),
        }?;
        match &self.dataset {
            DatasetSpec::Beta { n, .. } | DatasetSpec::SquareWave { n, .. } | DatasetSpec::Uniform { n } if *n == 0 => {
                fail("n must be at least 1".into())
            }
            _ => Ok(()),
        }
    }
}

/// One aggregated line of results.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub epsilon: f64,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub reps: usize,
    pub seed: u64,
    pub ms: u64,
}

/// One metric value from one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub dataset: String,
    pub method: String,
    pub epsilon: f64,
    pub metric: String,
    pub trial: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

/// Seed of trial `trial` of `label` at budget `eps`.
pub fn trial_seed(master: u64, label: &str, eps: PrivacyBudget, trial: usize) -> u64 {
    derive_seed(master, &[tags::TRIAL, label_tag(label), eps.epsilon().to_bits(), trial as u64])
}

/// Estimated cdf of `method` on the `grid`.
pub fn estimate_cdf(
    method: Method,
    values: &[f64],
    eps: PrivacyBudget,
    level: Option<u32>,
    postprocess: bool,
    seed: u64,
    grid: usize,
) -> Result<StepCdf> {
    match method {
        Method::Wavelet => {
            let mut cfg = EstimatorConfig::new(eps, seed).with_postprocess(postprocess);
            cfg.level = level;
            cdf_of(&estimate(values, &cfg)?, grid)
        }
        Method::Binning(d) => binned_cdf(&binning_estimate(values, d, eps, seed)?, grid),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

struct Truth {
    label: String,
    values: Vec<f64>,
    empirical: Empirical,
    grid_cdf: StepCdf,
}

fn load_truth(spec: &ExperimentSpec) -> Result<Truth> {
    let data = spec.dataset.load(spec.seed)?;
    let empirical = Empirical::new(data.values())?;
    let grid_cdf = empirical.on_grid(spec.grid)?;
    Ok(Truth {
        label: data.label().to_owned(),
        values: data.into_values(),
        empirical,
        grid_cdf,
    })
}

fn evaluate(
    spec: &ExperimentSpec,
    truth: &Truth,
    est: &StepCdf,
    eps: PrivacyBudget,
    trial: usize,
) -> Result<Vec<f64>> {
    spec.metrics
        .iter()
        .map(|metric| match metric {
            Metric::Wasserstein => metrics::wasserstein(est, &truth.grid_cdf),
            Metric::Ks => metrics::ks(est, &truth.grid_cdf),
            Metric::RangeQuery(alpha) => {
                // Shared across methods, so every method answers the same intervals.
                let mut rng = rng_for(
                    spec.seed,
                    &[tags::RANGE_QUERY, alpha.to_bits(), eps.epsilon().to_bits(), trial as u64],
                );
                metrics::range_query_mae(est, &truth.empirical, *alpha, spec.range_queries, &mut rng)
            }
        })
        .collect()
}

fn fixed_level(spec: &ExperimentSpec) -> Result<Option<u32>> {
    match spec.level {
        LevelMode::Auto => Ok(None),
        LevelMode::Fixed(j) => Ok(Some(j)),
        LevelMode::Sweep(..) => Err(Error::Config("a level range is only meaningful for jsweep".into())),
    }
}

/// Runs every `(method, epsilon, trial)` and aggregates each metric.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_detailed(spec).map(|out| out.rows)
}

pub fn run_detailed(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    let level = fixed_level(spec)?;
    let truth = load_truth(spec)?;

    let jobs: Vec<(Method, PrivacyBudget, usize)> = spec
        .methods
        .iter()
        .flat_map(|&m| {
            spec.epsilons
                .iter()
                .flat_map(move |&e| (0..spec.reps).map(move |t| (m, e, t)))
        })
        .collect();
    let results: Vec<(Vec<f64>, u64)> = jobs
        .par_iter()
        .map(|&(method, eps, trial)| {
            let label = method.to_string();
            let start = Instant::now();
            let seed = trial_seed(spec.seed, &label, eps, trial);
            estimate_cdf(method, &truth.values, eps, level, spec.postprocess, seed, spec.grid)
                .and_then(|est| evaluate(spec, &truth, &est, eps, trial))
                .map(|vals| (vals, start.elapsed().as_millis() as u64))
                .map_err(|source| Error::Trial {
                    method: label,
                    epsilon: eps.epsilon(),
                    trial,
                    source: Box::new(source),
                })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for (group, chunk) in jobs.chunks(spec.reps).zip(results.chunks(spec.reps)) {
        let (method, eps, _) = group[0];
        let ms = if spec.timing { chunk.iter().map(|(_, ms)| ms).sum() } else { 0 };
        for (i, metric) in spec.metrics.iter().enumerate() {
            let values: Vec<f64> = chunk.iter().map(|(vals, _)| vals[i]).collect();
            let (mean, sd) = mean_sd(&values);
            rows.push(ResultRow {
                dataset: truth.label.clone(),
                method: method.to_string(),
                epsilon: eps.epsilon(),
                metric: metric.to_string(),
                mean,
                sd,
                reps: spec.reps,
                seed: spec.seed,
                ms,
            });
            for (trial, value) in values.into_iter().enumerate() {
                trials.push(TrialRecord {
                    dataset: truth.label.clone(),
                    method: method.to_string(),
                    epsilon: eps.epsilon(),
                    metric: metric.to_string(),
                    trial,
                    value,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset, &a.method)
            .cmp(&(&b.dataset, &b.method))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.metric.cmp(&b.metric))
    });
    trials.sort_by(|a, b| {
        (&a.dataset, &a.method)
            .cmp(&(&b.dataset, &b.method))
            .then(a.epsilon.total_cmp(&b.epsilon))
            .then(a.metric.cmp(&b.metric))
            .then(a.trial.cmp(&b.trial))
    });
    Ok(RunOutput { rows, trials })
}

/// Empirical Wasserstein error against the theoretical bound at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dataset: String,
    pub epsilon: f64,
    pub level: u32,
    pub mean: f64,
    pub sd: f64,
    pub bound: f64,
    pub reps: usize,
    pub seed: u64,
}

/// Wavelet estimator at every level of the spec's range, for every budget.
pub fn jsweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let LevelMode::Sweep(lo, hi) = spec.level else {
        return Err(Error::Config("jsweep needs a level range (levels = [lo, hi])".into()));
    };
    let truth = load_truth(spec)?;
    let n = truth.values.len();
    let jobs: Vec<(PrivacyBudget, u32, usize)> = spec
        .epsilons
        .iter()
        .flat_map(|&e| (lo..=hi).flat_map(move |j| (0..spec.reps).map(move |t| (e, j, t))))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(eps, level, trial)| {
            let label = format!("wavelet-j{level}");
            let seed = trial_seed(spec.seed, &label, eps, trial);
            estimate_cdf(Method::Wavelet, &truth.values, eps, Some(level), spec.postprocess, seed, spec.grid)
                .and_then(|est| metrics::wasserstein(&est, &truth.grid_cdf))
                .map_err(|source| Error::Trial {
                    method: label,
                    epsilon: eps.epsilon(),
                    trial,
                    source: Box::new(source),
                })
        })
        .collect::<Result<_>>()?;
    jobs.chunks(spec.reps)
        .zip(values.chunks(spec.reps))
        .map(|(group, vals)| {
            let (eps, level, _) = group[0];
            let (mean, sd) = mean_sd(vals);
            Ok(SweepRow {
                dataset: truth.label.clone(),
                epsilon: eps.epsilon(),
                level,
                mean,
                sd,
                bound: compute_bound(n, level, eps)?,
                reps: spec.reps,
                seed: spec.seed,
            })
        })
        .collect()
}

pub const RESULT_HEADER: [&str; 9] = ["dataset", "method", "epsilon", "metric", "mean", "sd", "reps", "seed", "ms"];
pub const TRIAL_HEADER: [&str; 6] = ["dataset", "method", "epsilon", "metric", "trial", "value"];
pub const SWEEP_HEADER: [&str; 8] = ["dataset", "epsilon", "J", "mean", "sd", "bound", "reps", "seed"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("{}: csv: {other:?}", path.display())),
    }
}

fn write_csv<W: Write, I>(out: W, header: &[&str], records: I) -> std::result::Result<(), csv::Error>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn result_records(rows: &[ResultRow]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| {
        vec![
            r.dataset.clone(),
            r.method.clone(),
            r.epsilon.to_string(),
            r.metric.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
            r.ms.to_string(),
        ]
    })
}

/// Writes the results table as CSV to any sink.
pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    write_csv(out, &RESULT_HEADER, result_records(rows)).map_err(|e| csv_err(Path::new("<output>"), e))
}

fn to_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(fs::File) -> std::result::Result<(), csv::Error>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f(file).map_err(|e| csv_err(path, e))
}

/// Writes the results table to `path`.
pub fn emit(rows: &[ResultRow], path: &Path) -> Result<()> {
    to_file(path, |f| write_csv(f, &RESULT_HEADER, result_records(rows)))
}

/// Writes one line per trial and metric, for plotting.
pub fn emit_long(trials: &[TrialRecord], path: &Path) -> Result<()> {
    let records = trials.iter().map(|t| {
        vec![
            t.dataset.clone(),
            t.method.clone(),
            t.epsilon.to_string(),
            t.metric.clone(),
            t.trial.to_string(),
            t.value.to_string(),
        ]
    });
    to_file(path, |f| write_csv(f, &TRIAL_HEADER, records))
}

fn sweep_records(rows: &[SweepRow]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| {
        vec![
            r.dataset.clone(),
            r.epsilon.to_string(),
            r.level.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.bound.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
        ]
    })
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    write_csv(out, &SWEEP_HEADER, sweep_records(rows)).map_err(|e| csv_err(Path::new("<output>"), e))
}

pub fn emit_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    to_file(path, |f| write_csv(f, &SWEEP_HEADER, sweep_records(rows)))
}
