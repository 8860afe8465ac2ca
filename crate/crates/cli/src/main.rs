//! `gamma-unmix`: simulate labelled gamma-ray spectra, fit and identify
//! radionuclides, and score results.
//!
//! Exit codes: 0 on success, 2 on usage or input errors, 3 when more than
//! `--max-nonconverged-frac` of the fits failed to converge.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gamma_unmix::builtin;
use gamma_unmix::metrics::MetricsReport;
use gamma_unmix::optimize::FitOptions;
use gamma_unmix::pipeline::{
    run_identify, run_report, run_score, run_unmix, with_jobs, SourceSpec, ThresholdMode,
};
use gamma_unmix::signature::{load_library, ChannelGrid};
use gamma_unmix::simulate::{generate_dataset, Scenario, ScenarioConfig, Split};
use gamma_unmix::variability::{SignatureManifold, SignatureSource, Variability};
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment override for the simulation seed; takes precedence over
/// `--seed` so batch schedulers can inject seeds without editing commands.
const SEED_ENV: &str = "GAMMA_UNMIX_SEED";

#[derive(Parser)]
#[command(
    name = "gamma-unmix",
    version,
    about = "Poisson unmixing and radionuclide identification for gamma-ray spectra"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset directory.
    Simulate {
        /// Signature regime: known, deformed, or shifted.
        #[arg(long)]
        scenario: Scenario,
        /// Number of spectra.
        #[arg(long)]
        n: usize,
        /// RNG seed (the GAMMA_UNMIX_SEED environment variable wins).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reference signature library (CSV or JSON) replacing the built-in.
        #[arg(long)]
        signatures: Option<PathBuf>,
        /// Deformation manifold directory replacing the built-in.
        #[arg(long)]
        manifold_dir: Option<PathBuf>,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the full signature library to every spectrum of a split.
    Unmix {
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split (train, val, test); default: all spectra.
        #[arg(long)]
        split: Option<Split>,
        /// Variability model to fit with: none, manifold, or shift.
        #[arg(long, default_value_t = Variability::None)]
        variability: Variability,
        /// Override the reference signature library.
        #[arg(long)]
        signatures: Option<PathBuf>,
        /// Override the deformation manifold directory.
        #[arg(long)]
        manifold_dir: Option<PathBuf>,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Tolerated fraction of non-converged fits before exit code 3.
        #[arg(long, default_value_t = 0.05)]
        max_nonconverged_frac: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify radionuclides per spectrum with a greedy likelihood-ratio
    /// search, and print summary metrics against the dataset truth.
    Identify {
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split (train, val, test); default: all spectra.
        #[arg(long)]
        split: Option<Split>,
        /// Variability model to fit with: none, manifold, or shift.
        #[arg(long, default_value_t = Variability::None)]
        variability: Variability,
        /// Override the reference signature library.
        #[arg(long)]
        signatures: Option<PathBuf>,
        /// Override the deformation manifold directory.
        #[arg(long)]
        manifold_dir: Option<PathBuf>,
        /// Target per-spectrum false-positive rate of the acceptance test.
        #[arg(long, default_value_t = 0.01)]
        expected_fpr: f64,
        /// Calibrate the threshold on freshly simulated background-only
        /// spectra instead of the chi-square quantile; the value is how many
        /// (omit it for 2000).
        #[arg(long, num_args = 0..=1, default_missing_value = "2000")]
        threshold_calibrate: Option<usize>,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Tolerated fraction of non-converged fits before exit code 3.
        #[arg(long, default_value_t = 0.05)]
        max_nonconverged_frac: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an external prediction file against the dataset truth.
    Score {
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split (train, val, test); default: all spectra.
        #[arg(long)]
        split: Option<Split>,
        /// CSV with header `index,<radionuclide>,...` and values in [0, 1];
        /// the index column carries each scored spectrum's dataset index.
        #[arg(long)]
        predictions: PathBuf,
        /// Presence threshold applied to the prediction values.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the report files from an identification run's results.
    Report {
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one split (train, val, test); default: all spectra.
        #[arg(long)]
        split: Option<Split>,
        /// `results.jsonl` from a previous `identify` run.
        #[arg(long)]
        results: PathBuf,
        /// Method label stored in the report.
        #[arg(long, default_value = "greedy")]
        method: String,
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn print_summary(n: usize, threshold: Option<f64>, report: &MetricsReport, nonconverged: usize) {
    let id = &report.identification;
    let mut row = format!("n={n}");
    if let Some(t) = threshold {
        row.push_str(&format!(" threshold={t:.4}"));
    }
    row.push_str(&format!(
        " accuracy={} ppr={} fpr={} fnr={}",
        pct(id.accuracy),
        pct(id.perfect_prediction_rate),
        pct(id.false_positive_rate),
        pct(id.false_negative_rate),
    ));
    if let Some(rae) = report.quantification.relative_absolute_error {
        row.push_str(&format!(" rae={}", pct(rae)));
    }
    row.push_str(&format!(" nonconverged={nonconverged}"));
    println!("{row}");
}

/// Exit code 3 when too many fits failed to converge.
fn convergence_exit(n: usize, nonconverged: usize, max_frac: f64) -> ExitCode {
    if n > 0 && (nonconverged as f64 / n as f64) > max_frac {
        eprintln!(
            "warning: {nonconverged} of {n} fits did not converge \
             (more than {max_frac} of the batch)"
        );
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn simulation_source(
    scenario: Scenario,
    grid: ChannelGrid,
    signatures: Option<&PathBuf>,
    manifold_dir: Option<&PathBuf>,
) -> Result<SignatureSource> {
    match scenario {
        Scenario::Known => {
            let lib = match signatures {
                Some(path) => load_library(path)
                    .with_context(|| format!("--signatures {}", path.display()))?,
                None => builtin::reference_library(grid)?,
            };
            Ok(SignatureSource::Fixed(lib))
        }
        Scenario::Deformed => {
            let man = match manifold_dir {
                Some(dir) => SignatureManifold::load_dir(dir)
                    .with_context(|| format!("--manifold-dir {}", dir.display()))?,
                None => builtin::deformed_manifold(grid, builtin::DEFAULT_MANIFOLD_KNOTS)?,
            };
            Ok(SignatureSource::Manifold(man))
        }
        Scenario::Shifted => {
            let model = match signatures {
                Some(path) => {
                    let lib = load_library(path)
                        .with_context(|| format!("--signatures {}", path.display()))?;
                    gamma_unmix::variability::ShiftModel::with_defaults(lib)?
                }
                None => builtin::shift_model(grid)?,
            };
            Ok(SignatureSource::Shift(model))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            scenario,
            n,
            seed,
            signatures,
            manifold_dir,
            jobs,
            out,
        } => {
            let seed = match std::env::var(SEED_ENV) {
                Ok(s) => s
                    .parse::<u64>()
                    .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?,
                Err(_) => seed,
            };
            let grid = ChannelGrid::default();
            let source =
                simulation_source(scenario, grid, signatures.as_ref(), manifold_dir.as_ref())?;
            let config = ScenarioConfig::new(scenario, n, seed);
            let manifest = with_jobs(jobs, || generate_dataset(&config, &source, &out))?
                .with_context(|| format!("--out {}", out.display()))?;
            let (tr, va, te) = gamma_unmix::simulate::split_sizes(n, config.split_fractions);
            println!(
                "wrote {n} {}-scenario spectra to {} (train/val/test = {tr}/{va}/{te}, seed {seed}, {} signatures)",
                manifest.scenario,
                out.display(),
                manifest.names.len(),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Unmix {
            data,
            split,
            variability,
            signatures,
            manifold_dir,
            jobs,
            max_nonconverged_frac,
            out,
        } => {
            let spec = SourceSpec {
                variability,
                signatures,
                manifold_dir,
            };
            let summary = run_unmix(&data, split, &spec, &FitOptions::default(), jobs, &out)
                .with_context(|| format!("--data {}", data.display()))?;
            println!(
                "fitted {} spectra into {} (nonconverged {})",
                summary.n_spectra,
                out.display(),
                summary.n_nonconverged,
            );
            Ok(convergence_exit(
                summary.n_spectra,
                summary.n_nonconverged,
                max_nonconverged_frac,
            ))
        }
        Command::Identify {
            data,
            split,
            variability,
            signatures,
            manifold_dir,
            expected_fpr,
            threshold_calibrate,
            jobs,
            max_nonconverged_frac,
            out,
        } => {
            let spec = SourceSpec {
                variability,
                signatures,
                manifold_dir,
            };
            let mode = match threshold_calibrate {
                Some(n_spectra) => ThresholdMode::Calibrated { n_spectra },
                None => ThresholdMode::Analytic,
            };
            let outcome = run_identify(&data, split, &spec, expected_fpr, mode, jobs, &out)
                .with_context(|| format!("--data {}", data.display()))?;
            print_summary(
                outcome.summary.n_spectra,
                Some(outcome.threshold),
                &outcome.metrics,
                outcome.summary.n_nonconverged,
            );
            Ok(convergence_exit(
                outcome.summary.n_spectra,
                outcome.summary.n_nonconverged,
                max_nonconverged_frac,
            ))
        }
        Command::Score {
            data,
            split,
            predictions,
            threshold,
            out,
        } => {
            let report = run_score(&data, split, &predictions, threshold, &out)
                .with_context(|| format!("--predictions {}", predictions.display()))?;
            print_summary(report.n_spectra, None, &report, 0);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report {
            data,
            split,
            results,
            method,
            out,
        } => {
            let report = run_report(&data, split, &results, &method, &out)
                .with_context(|| format!("--results {}", results.display()))?;
            print_summary(report.n_spectra, None, &report, 0);
            println!("report files written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
