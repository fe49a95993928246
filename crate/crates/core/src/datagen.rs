//! Synthetic datasets on `[0, 1]` and ingestion of external numeric files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Values in `[0, 1]` plus a short description of where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    label: String,
}

impl Dataset {
    pub fn new(values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Domain { value: bad });
        }
        Ok(Dataset {
            values,
            label: label.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `n` draws from Beta(a, b) for integer `a, b >= 1`: the `a`-th smallest of
/// `a + b - 1` independent uniforms.
pub fn gen_beta<R: Rng + ?Sized>(n: usize, a: u32, b: u32, rng: &mut R) -> Result<Dataset> {
    if a == 0 || b == 0 {
        return Err(Error::invalid(format!(
            "Beta parameters must be integers >= 1, got ({a}, {b})"
        )));
    }
    let k = (a + b - 1) as usize;
    let mut buf = vec![0.0f64; k];
    let values = (0..n)
        .map(|_| {
            buf.iter_mut().for_each(|u| *u = rng.gen());
            let (_, kth, _) = buf.select_nth_unstable_by(a as usize - 1, f64::total_cmp);
            *kth
        })
        .collect();
    Dataset::new(values, format!("beta-{a}-{b}"))
}

/// `n` draws from the square wave with strip width `h = 2^-r`, `r` in `1..=4`:
/// density 1.5 on strips with odd index `floor(x/h)` and 0.5 on even ones.
pub fn gen_squarewave<R: Rng + ?Sized>(n: usize, h: f64, rng: &mut R) -> Result<Dataset> {
    let strips = match h {
        h if h == 0.5 => 2u32,
        h if h == 0.25 => 4,
        h if h == 0.125 => 8,
        h if h == 0.0625 => 16,
        _ => {
            return Err(Error::invalid(format!(
                "strip width must be 1/2, 1/4, 1/8 or 1/16, got {h}"
            )))
        }
    };
    let pairs = strips / 2;
    let values = (0..n)
        .map(|_| {
            // Odd strips hold 1.5h each, three quarters of the mass in total.
            let parity = if rng.gen::<f64>() < 0.75 { 1 } else { 0 };
            let strip = 2 * rng.gen_range(0..pairs) + parity;
            (f64::from(strip) + rng.gen::<f64>()) * h
        })
        .collect();
    Dataset::new(values, format!("squarewave-{h}"))
}

/// `n` uniform draws on `[0, 1)`.
pub fn gen_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Dataset> {
    Dataset::new((0..n).map(|_| rng.gen()).collect(), "uniform")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IngestOptions {
    /// Lower end of the affine map; defaults to the observed minimum.
    pub min: Option<f64>,
    /// Upper end of the affine map; defaults to the observed maximum.
    pub max: Option<f64>,
    /// Keep only raw values strictly below this cap.
    pub below: Option<f64>,
}

/// An ingested dataset and the affine map `x -> (x - min) / (max - min)` applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub min: f64,
    pub max: f64,
    /// Raw values dropped by the cap.
    pub dropped: usize,
}

/// Reads one decimal number per line (blank lines ignored) and maps the values to `[0, 1]`.
pub fn ingest(path: &Path, opts: IngestOptions) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut raw = Vec::new();
    let mut dropped = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let x: f64 = line
            .parse()
            .map_err(|_| parse_err(i + 1, format!("not a number: {line:?}")))?;
        if !x.is_finite() {
            return Err(parse_err(i + 1, format!("not a finite number: {line:?}")));
        }
        if opts.below.is_some_and(|cap| x >= cap) {
            dropped += 1;
            continue;
        }
        if opts.min.is_some_and(|lo| x < lo) || opts.max.is_some_and(|hi| x > hi) {
            return Err(parse_err(i + 1, format!("{x} lies outside the given range")));
        }
        raw.push(x);
    }
    if raw.is_empty() {
        return Err(Error::EmptySamples);
    }
    let min = opts.min.unwrap_or_else(|| raw.iter().copied().fold(f64::INFINITY, f64::min));
    let max = opts.max.unwrap_or_else(|| raw.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if !(max > min) {
        return Err(Error::invalid(format!(
            "cannot normalize: minimum {min} is not below maximum {max}"
        )));
    }
    let width = max - min;
    let values = raw.iter().map(|&x| ((x - min) / width).clamp(0.0, 1.0)).collect();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".to_owned());
    Ok(Ingested {
        dataset: Dataset::new(values, label)?,
        min,
        max,
        dropped,
    })
}

/// Writes one value per line, in the shortest form that reads back exactly.
pub fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for x in values {
        writeln!(out, "{x}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
