use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wavelet_ldp::bench::{self, ExperimentSpec};
use wavelet_ldp::datagen::{self, IngestOptions};
use wavelet_ldp::estimator::{compute_bound, estimate, EstimatorConfig};
use wavelet_ldp::mechanism::PrivacyBudget;
use wavelet_ldp::seed::rng_for;
use wavelet_ldp::{Error, ErrorKind};

/// Distribution estimation under local differential privacy with Haar wavelets.
#[derive(Debug, Parser)]
#[command(name = "wavelet-ldp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a density from a file of values and print its bin heights.
    Estimate {
        file: PathBuf,
        #[arg(long)]
        epsilon: f64,
        /// Expansion level; defaults to ceil(log2(n) / 2).
        #[arg(long = "J", short = 'J')]
        level: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_postprocess: bool,
        /// Map values to [0, 1] using their observed minimum and maximum.
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        min: Option<f64>,
        #[arg(long)]
        max: Option<f64>,
    },
    /// Run a benchmark described by a config file and write the results as CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Results file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one row per trial to this file.
        #[arg(long)]
        long: Option<PathBuf>,
    },
    /// Empirical Wasserstein error and its bound across a range of levels.
    Jsweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset, one value per line.
    GenData {
        kind: DataKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        a: u32,
        #[arg(long, default_value_t = 2)]
        b: u32,
        /// Strip width of the square wave.
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the error bound for n users at level J.
    Bound {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long = "J", short = 'J')]
        level: u32,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Beta,
    Squarewave,
    Uniform,
}

fn stdout_err(e: io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let stdout = io::stdout();
    match cli.command {
        Command::Estimate {
            file,
            epsilon,
            level,
            seed,
            no_postprocess,
            normalize,
            min,
            max,
        } => {
            let options = if normalize {
                IngestOptions { min, max, below: None }
            } else {
                IngestOptions {
                    min: Some(min.unwrap_or(0.0)),
                    max: Some(max.unwrap_or(1.0)),
                    below: None,
                }
            };
            let data = datagen::ingest(&file, options)?.dataset;
            let mut cfg = EstimatorConfig::new(PrivacyBudget::new(epsilon)?, seed).with_postprocess(!no_postprocess);
            cfg.level = level;
            let pdf = estimate(data.values(), &cfg)?;
            let mut out = BufWriter::new(stdout.lock());
            for h in pdf.heights() {
                writeln!(out, "{h}").map_err(stdout_err)?;
            }
            out.flush().map_err(stdout_err)
        }
        Command::Bench { config, out, long } => {
            let spec = ExperimentSpec::from_file(&config)?;
            let result = bench::run_detailed(&spec)?;
            match out {
                Some(path) => bench::emit(&result.rows, &path)?,
                None => bench::write_rows(&result.rows, stdout.lock())?,
            }
            if let Some(path) = long {
                bench::emit_long(&result.trials, &path)?;
            }
            Ok(())
        }
        Command::Jsweep { config, out } => {
            let spec = ExperimentSpec::from_file(&config)?;
            let rows = bench::jsweep(&spec)?;
            match out {
                Some(path) => bench::emit_sweep(&rows, &path),
                None => bench::write_sweep(&rows, stdout.lock()),
            }
        }
        Command::GenData {
            kind,
            n,
            a,
            b,
            h,
            seed,
            out,
        } => {
            let mut rng = rng_for(seed, &[]);
            let data = match kind {
                DataKind::Beta => datagen::gen_beta(n, a, b, &mut rng)?,
                DataKind::Squarewave => {
                    let h = h.ok_or_else(|| Error::InvalidParameter("squarewave needs --h".into()))?;
                    datagen::gen_squarewave(n, h, &mut rng)?
                }
                DataKind::Uniform => datagen::gen_uniform(n, &mut rng)?,
            };
            datagen::write_values(Path::new(&out), data.values())
        }
        Command::Bound { n, epsilon, level } => {
            let bound = compute_bound(n, level, PrivacyBudget::new(epsilon)?)?;
            writeln!(stdout.lock(), "{bound}").map_err(stdout_err)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Internal => 3,
            })
        }
    }
}
