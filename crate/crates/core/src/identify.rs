//! Sparse identification: greedy model building under a likelihood-ratio test.
//!
//! Starting from a background-only model, each round fits every remaining
//! candidate alongside the current model (warm-started) and proposes the one
//! with the largest NLL drop. The candidate is accepted iff its likelihood
//! ratio statistic `2 * (L_without - L_with)` strictly exceeds a threshold;
//! the first rejection stops the search. The default threshold is the
//! chi-square(1) quantile at `1 - expected_fpr`; an empirical alternative can
//! be calibrated on background-only spectra. Accepted sources contributing
//! less than a configured share of the non-background counts are removed in a
//! single pass, followed by one refit.

use crate::error::{Error, Result};
use crate::optimize::{fit, FitOptions, FitProblem, FitResult, WarmStart};
use crate::variability::{SignatureSource, Variability};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::Path;

/// Minimum number of background-only spectra accepted for calibration.
pub const MIN_CALIBRATION_SPECTRA: usize = 1000;

#[derive(Debug, Clone)]
pub struct IdentifyConfig {
    /// Target per-spectrum false-positive rate of the acceptance test.
    pub expected_fpr: f64,
    /// Acceptance threshold on the likelihood-ratio statistic.
    pub lrt_threshold: f64,
    /// Accepted sources below this share of total non-background counts are
    /// removed after the search.
    pub contribution_floor: f64,
    /// Cap on accepted radionuclides (`None`: all candidates).
    pub max_model_size: Option<usize>,
    /// Variability mechanism the fits assume; must match the source.
    pub variability: Variability,
    pub fit_options: FitOptions,
}

impl IdentifyConfig {
    /// Configuration with the analytic default threshold: the chi-square(1)
    /// quantile at `1 - expected_fpr`, the asymptotic null of the one-extra-
    /// signature likelihood-ratio test.
    pub fn new(expected_fpr: f64) -> Result<Self> {
        if !(expected_fpr > 0.0 && expected_fpr <= 1.0) {
            return Err(Error::OutOfRange {
                what: "expected_fpr".into(),
                value: expected_fpr,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let lrt_threshold = if expected_fpr >= 1.0 {
            0.0
        } else {
            let chi2 = ChiSquared::new(1.0).expect("chi-square(1)");
            chi2.inverse_cdf(1.0 - expected_fpr)
        };
        Ok(IdentifyConfig {
            expected_fpr,
            lrt_threshold,
            contribution_floor: 0.01,
            max_model_size: None,
            variability: Variability::None,
            fit_options: FitOptions::default(),
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.lrt_threshold = threshold;
        self
    }

    pub fn with_variability(mut self, variability: Variability) -> Self {
        self.variability = variability;
        self
    }

    fn validate(&self, source: &SignatureSource) -> Result<()> {
        if !(self.lrt_threshold.is_finite() && self.lrt_threshold >= 0.0) {
            return Err(Error::invalid(
                "lrt_threshold",
                format!("{}", self.lrt_threshold),
            ));
        }
        if !(0.0..1.0).contains(&self.contribution_floor) {
            return Err(Error::OutOfRange {
                what: "contribution_floor".into(),
                value: self.contribution_floor,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if self.variability != source.variability() {
            return Err(Error::invalid(
                "variability",
                format!(
                    "configured {} but the signature source is {}",
                    self.variability,
                    source.variability()
                ),
            ));
        }
        Ok(())
    }
}

/// One proposal round of the greedy search.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Library column proposed this round.
    pub candidate: usize,
    /// NLL drop from adding it.
    pub delta_nll: f64,
    /// Likelihood-ratio statistic, clamped at zero.
    pub lrt: f64,
    pub accepted: bool,
}

/// Outcome of the greedy identification of one spectrum.
#[derive(Debug, Clone)]
pub struct Identification {
    /// Presence call per radionuclide (background excluded).
    pub labels: Vec<bool>,
    /// Final model columns, background included, ascending.
    pub active: Vec<usize>,
    /// Fit of the final model.
    pub fit: FitResult,
    pub steps: Vec<StepRecord>,
    /// Columns accepted by the test but removed by the contribution floor.
    pub removed: Vec<usize>,
}

/// Candidates enter warm-started fits with this many counts (or a millionth
/// of the spectrum total, whichever is larger): strictly positive so the
/// multiplicative updates can move them, small enough not to bias the fit.
fn entry_counts(sum_y: f64) -> f64 {
    (1e-6 * sum_y).max(1.0)
}

fn fit_active(
    y: &[f64],
    source: &SignatureSource,
    active: Vec<usize>,
    warm: Option<WarmStart>,
    options: &FitOptions,
) -> Result<FitResult> {
    let mut problem = FitProblem::new(y, source, active)?.with_options(options.clone());
    if let Some(w) = warm {
        problem = problem.with_warm(w);
    }
    fit(&problem)
}

/// Fit every remaining candidate next to the current model; return the one
/// with the largest likelihood-ratio statistic (ties: lowest index).
fn best_candidate(
    y: &[f64],
    source: &SignatureSource,
    active: &[usize],
    current: &FitResult,
    options: &FitOptions,
) -> Result<Option<(usize, FitResult, f64)>> {
    let n = source.n_signatures();
    let sum_y: f64 = y.iter().sum();
    let delta = entry_counts(sum_y);
    let mut best: Option<(usize, FitResult, f64)> = None;
    for j in 1..n {
        if active.contains(&j) {
            continue;
        }
        let mut cand_active = active.to_vec();
        cand_active.push(j);
        cand_active.sort_unstable();
        let mut warm_a = current.counts_full(n);
        warm_a[j] = delta;
        let warm = WarmStart {
            a: warm_a,
            param: current.param_hat,
        };
        let cand_fit = fit_active(y, source, cand_active, Some(warm), options)?;
        let lrt = (2.0 * (current.nll - cand_fit.nll)).max(0.0);
        let lrt = if lrt.is_nan() { 0.0 } else { lrt };
        if best.as_ref().is_none_or(|(_, _, b)| lrt > *b) {
            best = Some((j, cand_fit, lrt));
        }
    }
    Ok(best)
}

/// Split `(column, counts)` pairs into kept and removed under the rule:
/// a source is removed when its counts are below `floor` times the total
/// counts of all listed sources. Removal never adds sources, and because the
/// comparison total only shrinks, applying the rule to its own output changes
/// nothing.
pub fn apply_contribution_floor(counts: &[(usize, f64)], floor: f64) -> (Vec<usize>, Vec<usize>) {
    let total: f64 = counts.iter().map(|(_, a)| a).sum();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for &(j, a) in counts {
        if a < floor * total {
            removed.push(j);
        } else {
            kept.push(j);
        }
    }
    (kept, removed)
}

/// Greedy identification of one spectrum.
pub fn greedy_identify(
    y: &[f64],
    source: &SignatureSource,
    config: &IdentifyConfig,
) -> Result<Identification> {
    config.validate(source)?;
    let n = source.n_signatures();
    let n_radio = n - 1;
    let max_size = config.max_model_size.unwrap_or(n_radio).min(n_radio);

    let mut active = vec![0usize];
    let mut current = fit_active(y, source, active.clone(), None, &config.fit_options)?;
    let mut steps = Vec::new();

    while active.len() - 1 < max_size {
        let Some((j, cand_fit, lrt)) =
            best_candidate(y, source, &active, &current, &config.fit_options)?
        else {
            break;
        };
        let accepted = lrt > config.lrt_threshold;
        steps.push(StepRecord {
            candidate: j,
            delta_nll: current.nll - cand_fit.nll,
            lrt,
            accepted,
        });
        if !accepted {
            break;
        }
        active.push(j);
        active.sort_unstable();
        current = cand_fit;
    }

    // Contribution floor: drop accepted sources with a negligible share of
    // the non-background counts, then refit once.
    let mut removed = Vec::new();
    if active.len() > 1 && config.contribution_floor > 0.0 {
        let radio_counts: Vec<(usize, f64)> = active
            .iter()
            .zip(&current.a_hat)
            .filter(|(&j, _)| j != 0)
            .map(|(&j, &a)| (j, a))
            .collect();
        let (_, dropped) = apply_contribution_floor(&radio_counts, config.contribution_floor);
        if !dropped.is_empty() {
            removed = dropped;
            let warm = WarmStart {
                a: current.counts_full(n),
                param: current.param_hat,
            };
            active.retain(|j| !removed.contains(j));
            current = fit_active(y, source, active.clone(), Some(warm), &config.fit_options)?;
        }
    }

    let mut labels = vec![false; n_radio];
    for &j in &active {
        if j > 0 {
            labels[j - 1] = true;
        }
    }
    Ok(Identification {
        labels,
        active,
        fit: current,
        steps,
        removed,
    })
}

/// The statistic calibration thresholds are built from: the largest
/// likelihood-ratio statistic any single candidate achieves against the
/// background-only model.
pub fn first_step_statistic(
    y: &[f64],
    source: &SignatureSource,
    config: &IdentifyConfig,
) -> Result<f64> {
    config.validate(source)?;
    let base = fit_active(y, source, vec![0], None, &config.fit_options)?;
    let best = best_candidate(y, source, &[0], &base, &config.fit_options)?;
    Ok(best.map_or(0.0, |(_, _, lrt)| lrt))
}

/// Empirical quantile with the "higher" convention: the smallest element with
/// at least `ceil(q n)` values at or below it.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile", "no values"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange {
            what: "quantile level".into(),
            value: q,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// Calibrate the acceptance threshold empirically: the `1 - expected_fpr`
/// quantile of the first-step statistic over background-only spectra. A
/// candidate whose statistic strictly exceeds this is accepted, so the
/// false-positive rate on null spectra matches `expected_fpr` by
/// construction of the quantile.
pub fn calibrate_threshold(
    spectra: &[Vec<u32>],
    source: &SignatureSource,
    config: &IdentifyConfig,
) -> Result<f64> {
    if spectra.len() < MIN_CALIBRATION_SPECTRA {
        return Err(Error::TooFewSpectra {
            needed: MIN_CALIBRATION_SPECTRA,
            got: spectra.len(),
        });
    }
    let stats: Result<Vec<f64>> = spectra
        .par_iter()
        .map(|y| {
            let yf: Vec<f64> = y.iter().map(|&c| c as f64).collect();
            first_step_statistic(&yf, source, config)
        })
        .collect();
    let stats = stats?;
    empirical_quantile(&stats, 1.0 - config.expected_fpr)
}

/// Read an external prediction file: CSV with header `index,<name>,...`
/// covering every radionuclide, one row per scored spectrum in order, values
/// in [0, 1]. The `index` column carries each spectrum's dataset index
/// (`expected_indices`), so predictions for a split use that split's
/// indices — exactly what `identify` writes. Returns boolean calls at
/// `threshold` (strictly greater).
pub fn score_external_predictions(
    path: &Path,
    radionuclides: &[String],
    expected_indices: &[usize],
    threshold: f64,
) -> Result<Vec<Vec<bool>>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::OutOfRange {
            what: "prediction threshold".into(),
            value: threshold,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::invalid("prediction file", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::invalid("prediction header", e.to_string()))?
        .clone();
    if headers.get(0) != Some("index") {
        return Err(Error::invalid(
            "prediction header",
            "first column must be 'index'",
        ));
    }
    let mut columns = Vec::with_capacity(radionuclides.len());
    for name in radionuclides {
        let col = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { name: name.clone() })?;
        columns.push(col);
    }

    let mut calls = Vec::with_capacity(expected_indices.len());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line: row + 2,
            msg: e.to_string(),
        })?;
        let idx: usize =
            record
                .get(0)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: row + 2,
                    msg: "bad index".into(),
                })?;
        let expected = *expected_indices.get(row).ok_or_else(|| Error::Dimension {
            context: "prediction rows".into(),
            expected: expected_indices.len(),
            got: row + 1,
        })?;
        if idx != expected {
            return Err(Error::IndexMismatch {
                row: row + 2,
                expected,
                got: idx,
            });
        }
        let mut flags = Vec::with_capacity(columns.len());
        for (&col, name) in columns.iter().zip(radionuclides) {
            let raw = record.get(col).ok_or_else(|| Error::Parse {
                path: path.into(),
                line: row + 2,
                msg: format!("missing value for {name}"),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: row + 2,
                msg: format!("bad value {raw:?} for {name}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    what: format!("prediction for {name} at row {}", row + 2),
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
            flags.push(v > threshold);
        }
        calls.push(flags);
    }
    if calls.len() != expected_indices.len() {
        return Err(Error::Dimension {
            context: "prediction rows".into(),
            expected: expected_indices.len(),
            got: calls.len(),
        });
    }
    Ok(calls)
}
