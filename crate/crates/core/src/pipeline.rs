//! Batch orchestration over dataset directories: full-library unmixing,
//! greedy identification, scoring of external predictions, and report
//! generation. Every command writes its outputs in spectrum-index order and a
//! `run.json` provenance stamp; with a fixed dataset the result bytes are
//! independent of the worker count.

use crate::error::{Error, Result};
use crate::hash::sha256_file;
use crate::identify::{
    calibrate_threshold, greedy_identify, score_external_predictions, IdentifyConfig,
};
use crate::metrics::{build_report, log_spaced_edges, BinningSpec, EvalRecord, MetricsReport};
use crate::optimize::{fit, FitOptions, FitProblem};
use crate::signature::load_library;
use crate::simulate::{generate_spectrum, Dataset, Split, TruthRecord};
use crate::variability::{SignatureManifold, SignatureSource, Variability};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_BINS_FILE: &str = "report_bins.csv";
pub const RECALL_CURVES_FILE: &str = "recall_curves.csv";
pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Mixed into the dataset seed for calibration draws so null spectra never
/// reuse the dataset's own RNG streams.
const CALIBRATION_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Provenance stamp written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub jobs: usize,
    pub config: serde_json::Value,
    /// SHA-256 of the input files.
    pub inputs: BTreeMap<String, String>,
    pub n_spectra: usize,
}

fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    jobs: usize,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    n_spectra: usize,
) -> Result<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        jobs,
        config,
        inputs,
        n_spectra,
    };
    let path = out_dir.join(RUN_MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid("run manifest", e.to_string()))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

fn dataset_checksums(dir: &Path, dataset: &Dataset) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for rel in [
        "manifest.json",
        dataset.manifest.files.spectra.as_str(),
        dataset.manifest.files.truth.as_str(),
    ] {
        let path = dir.join(rel);
        inputs.insert(rel.to_string(), sha256_file(&path)?);
    }
    Ok(inputs)
}

/// Run `f` on a dedicated thread pool of `jobs` workers (0: rayon's default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid("thread pool", e.to_string()))?;
    Ok(pool.install(f))
}

/// How a command should model the signatures it fits with.
#[derive(Debug, Clone, Default)]
pub struct SourceSpec {
    pub variability: Variability,
    /// Override for the fixed/reference library.
    pub signatures: Option<PathBuf>,
    /// Override for the deformation manifold.
    pub manifold_dir: Option<PathBuf>,
}

fn check_against_dataset(
    names: &[String],
    grid: crate::signature::ChannelGrid,
    dataset: &Dataset,
) -> Result<()> {
    if names != dataset.manifest.names.as_slice() {
        return Err(Error::invalid(
            "signature override",
            "signature names do not match the dataset",
        ));
    }
    if grid != dataset.manifest.grid {
        return Err(Error::invalid(
            "signature override",
            "channel grid does not match the dataset",
        ));
    }
    Ok(())
}

/// Build the signature source a fit should use against this dataset.
///
/// The fixed-library baseline uses, in order of preference: the explicit
/// override, the dataset's stored reference library, or — for manifold
/// datasets, which store no single library — the manifold's first snapshot.
pub fn resolve_source(
    dataset: &Dataset,
    dataset_dir: &Path,
    spec: &SourceSpec,
) -> Result<SignatureSource> {
    let reference = || -> Result<crate::signature::SignatureLibrary> {
        if let Some(path) = &spec.signatures {
            let lib = load_library(path)?;
            check_against_dataset(lib.names(), lib.grid(), dataset)?;
            return Ok(lib);
        }
        match &dataset.source {
            SignatureSource::Fixed(lib) => Ok(lib.clone()),
            SignatureSource::Shift(model) => Ok(model.reference().clone()),
            SignatureSource::Manifold(man) => Ok(man.eval(0.0)?),
        }
    };
    match spec.variability {
        Variability::None => Ok(SignatureSource::Fixed(reference()?)),
        Variability::Shift => {
            let lib = reference()?;
            let model = match &dataset.manifest.shift {
                Some(s) => {
                    crate::variability::ShiftModel::new(lib, s.alpha_range, s.amplification)?
                }
                None => crate::variability::ShiftModel::with_defaults(lib)?,
            };
            Ok(SignatureSource::Shift(model))
        }
        Variability::Manifold => {
            if let Some(dir) = &spec.manifold_dir {
                let man = SignatureManifold::load_dir(dir)?;
                check_against_dataset(man.names(), man.grid(), dataset)?;
                return Ok(SignatureSource::Manifold(man));
            }
            match &dataset.source {
                SignatureSource::Manifold(man) => Ok(SignatureSource::Manifold(man.clone())),
                _ => {
                    let rel = dataset.manifest.files.manifold.as_deref().ok_or_else(|| {
                        Error::invalid("source", "dataset stores no manifold; pass one explicitly")
                    })?;
                    Ok(SignatureSource::Manifold(SignatureManifold::load_dir(
                        &dataset_dir.join(rel),
                    )?))
                }
            }
        }
    }
}

/// Indices of the spectra belonging to `split` (all spectra when `None`).
pub fn split_indices(truth: &[TruthRecord], split: Option<Split>) -> Vec<usize> {
    truth
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| r.index)
        .collect()
}

/// Report binning adapted to a dataset: geometric count bins spanning the
/// configured total-count range with headroom, and parameter bins matching
/// the variability mechanism.
pub fn binning_for_dataset(dataset: &Dataset) -> Result<BinningSpec> {
    let (lo, hi) = dataset.manifest.config.total_counts_range;
    let count_edges = log_spaced_edges(lo * 0.5, hi * 2.0, 8)?;
    let param_edges = match &dataset.source {
        SignatureSource::Fixed(_) => None,
        SignatureSource::Manifold(man) => {
            let values = man.param_values();
            Some(log_spaced_edges(values[0], values[values.len() - 1], 6)?)
        }
        SignatureSource::Shift(model) => {
            let (alo, ahi) = model.alpha_range();
            Some(
                (0..=6)
                    .map(|i| alo + (ahi - alo) * i as f64 / 6.0)
                    .collect(),
            )
        }
    };
    Ok(BinningSpec {
        count_edges,
        param_edges,
    })
}

/// Per-spectrum output of a full-library fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnmixRow {
    pub index: usize,
    /// Estimated counts, one per signature, background first.
    pub counts: Vec<f64>,
    /// Physical variability parameter estimate, if the model has one.
    pub param: Option<f64>,
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-spectrum output of greedy identification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyRow {
    pub index: usize,
    /// Presence call per radionuclide, aligned with the names in the dataset
    /// manifest (background excluded).
    pub labels: Vec<bool>,
    /// Estimated counts, one per signature, background first; zero off the
    /// final model.
    pub counts: Vec<f64>,
    pub param: Option<f64>,
    pub nll: f64,
    pub converged: bool,
    pub steps: Vec<StepSummary>,
    /// Radionuclides accepted by the test but dropped by the contribution
    /// floor.
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSummary {
    pub candidate: String,
    pub lrt: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub n_spectra: usize,
    pub n_nonconverged: usize,
    pub out_dir: PathBuf,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        let line =
            serde_json::to_string(row).map_err(|e| Error::invalid("result row", e.to_string()))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn physical_param(source: &SignatureSource, latent: Option<f64>) -> Result<Option<f64>> {
    match latent {
        None => Ok(None),
        Some(p) => Ok(Some(source.physical_param(p)?)),
    }
}

/// Fit the full library to every spectrum of a split and write
/// `results.jsonl` plus a run manifest into `out_dir`.
pub fn run_unmix(
    dataset_dir: &Path,
    split: Option<Split>,
    spec: &SourceSpec,
    options: &FitOptions,
    jobs: usize,
    out_dir: &Path,
) -> Result<BatchSummary> {
    let dataset = Dataset::load(dataset_dir)?;
    let source = resolve_source(&dataset, dataset_dir, spec)?;
    let indices = split_indices(&dataset.truth, split);
    let n = source.n_signatures();
    let all: Vec<usize> = (0..n).collect();

    let rows: Result<Vec<UnmixRow>> = with_jobs(jobs, || {
        indices
            .par_iter()
            .map(|&i| {
                let y: Vec<f64> = dataset.spectra[i].iter().map(|&c| c as f64).collect();
                let problem =
                    FitProblem::new(&y, &source, all.clone())?.with_options(options.clone());
                let result = fit(&problem)?;
                Ok(UnmixRow {
                    index: i,
                    counts: result.counts_full(n),
                    param: physical_param(&source, result.param_hat)?,
                    nll: result.nll,
                    iterations: result.iterations,
                    converged: result.converged,
                })
            })
            .collect()
    })?;
    let rows = rows?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_jsonl(&out_dir.join(RESULTS_FILE), &rows)?;
    let config = json!({
        "dataset": dataset_dir.display().to_string(),
        "split": split.map(|s| s.to_string()),
        "variability": spec.variability.to_string(),
    });
    write_run_manifest(
        out_dir,
        "unmix",
        jobs,
        config,
        dataset_checksums(dataset_dir, &dataset)?,
        rows.len(),
    )?;
    Ok(BatchSummary {
        n_spectra: rows.len(),
        n_nonconverged: rows.iter().filter(|r| !r.converged).count(),
        out_dir: out_dir.to_path_buf(),
    })
}

/// How the identification threshold is chosen.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdMode {
    /// Chi-square(1) quantile at `1 - expected_fpr`.
    Analytic,
    /// Empirical quantile of the first-step statistic over freshly simulated
    /// background-only spectra.
    Calibrated { n_spectra: usize },
}

/// Background-only null spectra drawn from the dataset's own generator on a
/// seed stream disjoint from the dataset itself.
pub fn calibration_spectra(dataset: &Dataset, n: usize) -> Result<Vec<Vec<u32>>> {
    let mut config = dataset.manifest.config.clone();
    config.max_active = 0;
    config.n_spectra = n;
    config.seed = config.seed.wrapping_add(CALIBRATION_SEED_OFFSET);
    (0..n)
        .into_par_iter()
        .map(|i| Ok(generate_spectrum(&config, &dataset.source, i)?.y))
        .collect()
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub summary: BatchSummary,
    /// Threshold actually applied to the likelihood-ratio statistic.
    pub threshold: f64,
    pub metrics: MetricsReport,
}

/// Identify every spectrum of a split: writes `results.jsonl`,
/// `predictions.csv`, and a run manifest into `out_dir`, and returns
/// evaluation metrics against the dataset truth.
pub fn run_identify(
    dataset_dir: &Path,
    split: Option<Split>,
    spec: &SourceSpec,
    expected_fpr: f64,
    mode: ThresholdMode,
    jobs: usize,
    out_dir: &Path,
) -> Result<IdentifyOutcome> {
    let dataset = Dataset::load(dataset_dir)?;
    let source = resolve_source(&dataset, dataset_dir, spec)?;
    let mut config = IdentifyConfig::new(expected_fpr)?.with_variability(spec.variability);

    let threshold = match mode {
        ThresholdMode::Analytic => config.lrt_threshold,
        ThresholdMode::Calibrated { n_spectra } => with_jobs(jobs, || -> Result<f64> {
            let nulls = calibration_spectra(&dataset, n_spectra)?;
            calibrate_threshold(&nulls, &source, &config)
        })??,
    };
    config = config.with_threshold(threshold);

    let indices = split_indices(&dataset.truth, split);
    let n = source.n_signatures();
    let names = dataset.manifest.names.clone();

    let rows: Result<Vec<IdentifyRow>> = with_jobs(jobs, || {
        indices
            .par_iter()
            .map(|&i| {
                let y: Vec<f64> = dataset.spectra[i].iter().map(|&c| c as f64).collect();
                let id = greedy_identify(&y, &source, &config)?;
                Ok(IdentifyRow {
                    index: i,
                    labels: id.labels,
                    counts: id.fit.counts_full(n),
                    param: physical_param(&source, id.fit.param_hat)?,
                    nll: id.fit.nll,
                    converged: id.fit.converged,
                    steps: id
                        .steps
                        .iter()
                        .map(|s| StepSummary {
                            candidate: names[s.candidate].clone(),
                            lrt: s.lrt,
                            accepted: s.accepted,
                        })
                        .collect(),
                    removed: id.removed.iter().map(|&j| names[j].clone()).collect(),
                })
            })
            .collect()
    })?;
    let rows = rows?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_jsonl(&out_dir.join(RESULTS_FILE), &rows)?;
    write_predictions(&out_dir.join(PREDICTIONS_FILE), &names, &rows)?;

    let truth: Vec<&TruthRecord> = indices.iter().map(|&i| &dataset.truth[i]).collect();
    let records = eval_records(&truth, &rows)?;
    let radionuclides: Vec<String> = names[1..].to_vec();
    let metrics = build_report(&records, &radionuclides, &binning_for_dataset(&dataset)?)?;

    let config_echo = json!({
        "dataset": dataset_dir.display().to_string(),
        "split": split.map(|s| s.to_string()),
        "variability": spec.variability.to_string(),
        "expected_fpr": expected_fpr,
        "threshold": threshold,
        "calibrated": matches!(mode, ThresholdMode::Calibrated { .. }),
    });
    write_run_manifest(
        out_dir,
        "identify",
        jobs,
        config_echo,
        dataset_checksums(dataset_dir, &dataset)?,
        rows.len(),
    )?;

    Ok(IdentifyOutcome {
        summary: BatchSummary {
            n_spectra: rows.len(),
            n_nonconverged: rows.iter().filter(|r| !r.converged).count(),
            out_dir: out_dir.to_path_buf(),
        },
        threshold,
        metrics,
    })
}

/// `predictions.csv`: one row per spectrum, `index` plus a 0/1 column per
/// radionuclide.
fn write_predictions(path: &Path, names: &[String], rows: &[IdentifyRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::from("index");
    for name in &names[1..] {
        header.push(',');
        header.push_str(name);
    }
    header.push('\n');
    out.write_all(header.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for row in rows {
        let mut line = row.index.to_string();
        for &l in &row.labels {
            line.push_str(if l { ",1" } else { ",0" });
        }
        line.push('\n');
        out.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Join identification rows with their truth records.
fn eval_records(truth: &[&TruthRecord], rows: &[IdentifyRow]) -> Result<Vec<EvalRecord>> {
    if truth.len() != rows.len() {
        return Err(Error::Dimension {
            context: "results vs truth".into(),
            expected: truth.len(),
            got: rows.len(),
        });
    }
    truth
        .iter()
        .zip(rows)
        .map(|(t, r)| {
            if t.index != r.index {
                return Err(Error::IndexMismatch {
                    row: r.index,
                    expected: t.index,
                    got: r.index,
                });
            }
            Ok(EvalRecord {
                index: t.index,
                total_counts: t.counts.iter().sum::<u64>() as f64,
                n_active: t.labels.iter().filter(|&&l| l).count(),
                param: t.param,
                true_labels: t.labels.clone(),
                pred_labels: r.labels.clone(),
                true_counts: t.counts.iter().map(|&c| c as f64).collect(),
                true_weights: t.weights.clone(),
                pred_counts: Some(r.counts.clone()),
            })
        })
        .collect()
}

/// Evaluation report plus its method tag, as serialised to `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub report: MetricsReport,
}

/// Write `report.json`, `report_bins.csv`, and `recall_curves.csv`.
pub fn emit_report(out_dir: &Path, method: &str, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let doc = MethodReport {
        method: method.to_string(),
        report: report.clone(),
    };
    let json_path = out_dir.join(REPORT_JSON_FILE);
    let body =
        serde_json::to_string_pretty(&doc).map_err(|e| Error::invalid("report", e.to_string()))?;
    fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))?;

    let bins_path = out_dir.join(REPORT_BINS_FILE);
    let mut csv = String::from(
        "kind,lo,hi,n_spectra,accuracy,false_positive_rate,false_negative_rate,\
         perfect_prediction_rate,false_prediction_rate\n",
    );
    let mut push_bin = |kind: &str, lo: f64, hi: f64, m: &crate::metrics::IdentificationMetrics| {
        csv.push_str(&format!(
            "{kind},{lo},{hi},{},{},{},{},{},{}\n",
            m.n_spectra,
            m.accuracy,
            m.false_positive_rate,
            m.false_negative_rate,
            m.perfect_prediction_rate,
            m.false_prediction_rate,
        ));
    };
    for bin in &report.by_total_counts {
        push_bin("total_counts", bin.lo, bin.hi, &bin.metrics);
    }
    for (k, m) in &report.by_n_active {
        push_bin("n_active", *k as f64, *k as f64, m);
    }
    for bin in &report.by_param {
        push_bin("param", bin.lo, bin.hi, &bin.metrics);
    }
    fs::write(&bins_path, csv).map_err(|e| Error::io(&bins_path, e))?;

    let curves_path = out_dir.join(RECALL_CURVES_FILE);
    let mut csv = String::from("radionuclide,lo,hi,n_present,recall\n");
    for (name, points) in &report.recall_curves {
        for p in points {
            csv.push_str(&format!(
                "{name},{},{},{},{}\n",
                p.lo, p.hi, p.n_present, p.recall
            ));
        }
    }
    fs::write(&curves_path, csv).map_err(|e| Error::io(&curves_path, e))
}

/// Score an external prediction file against a dataset split and write the
/// report files into `out_dir`.
pub fn run_score(
    dataset_dir: &Path,
    split: Option<Split>,
    predictions: &Path,
    threshold: f64,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let dataset = Dataset::load(dataset_dir)?;
    let indices = split_indices(&dataset.truth, split);
    let radionuclides: Vec<String> = dataset.manifest.names[1..].to_vec();
    let calls = score_external_predictions(predictions, &radionuclides, &indices, threshold)?;

    let records: Vec<EvalRecord> = indices
        .iter()
        .zip(&calls)
        .map(|(&i, pred)| {
            let t = &dataset.truth[i];
            EvalRecord {
                index: t.index,
                total_counts: t.counts.iter().sum::<u64>() as f64,
                n_active: t.labels.iter().filter(|&&l| l).count(),
                param: t.param,
                true_labels: t.labels.clone(),
                pred_labels: pred.clone(),
                true_counts: t.counts.iter().map(|&c| c as f64).collect(),
                true_weights: t.weights.clone(),
                pred_counts: None,
            }
        })
        .collect();
    let report = build_report(&records, &radionuclides, &binning_for_dataset(&dataset)?)?;
    emit_report(out_dir, "external", &report)?;

    let mut inputs = dataset_checksums(dataset_dir, &dataset)?;
    inputs.insert(predictions.display().to_string(), sha256_file(predictions)?);
    let config = json!({
        "dataset": dataset_dir.display().to_string(),
        "split": split.map(|s| s.to_string()),
        "threshold": threshold,
    });
    write_run_manifest(out_dir, "score", 1, config, inputs, records.len())?;
    Ok(report)
}

fn read_identify_rows(path: &Path) -> Result<Vec<IdentifyRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: IdentifyRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Build the report files from a previous identification run's
/// `results.jsonl`.
pub fn run_report(
    dataset_dir: &Path,
    split: Option<Split>,
    results: &Path,
    method: &str,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let dataset = Dataset::load(dataset_dir)?;
    let indices = split_indices(&dataset.truth, split);
    let rows = read_identify_rows(results)?;
    let truth: Vec<&TruthRecord> = indices.iter().map(|&i| &dataset.truth[i]).collect();
    let records = eval_records(&truth, &rows)?;
    let radionuclides: Vec<String> = dataset.manifest.names[1..].to_vec();
    let report = build_report(&records, &radionuclides, &binning_for_dataset(&dataset)?)?;
    emit_report(out_dir, method, &report)?;

    let mut inputs = dataset_checksums(dataset_dir, &dataset)?;
    inputs.insert(results.display().to_string(), sha256_file(results)?);
    let config = json!({
        "dataset": dataset_dir.display().to_string(),
        "split": split.map(|s| s.to_string()),
        "method": method,
    });
    write_run_manifest(out_dir, "report", 1, config, inputs, records.len())?;
    Ok(report)
}
