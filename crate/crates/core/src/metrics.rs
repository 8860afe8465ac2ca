//! Evaluation metrics over per-spectrum identification and quantification
//! results.
//!
//! Identification quality is scored at two granularities. Per spectrum: a
//! false positive means at least one absent radionuclide was called present, a
//! false negative means at least one present radionuclide was missed, and a
//! perfect prediction means the whole label vector is right; the corresponding
//! rates divide by the number of spectra. Per radionuclide: accuracy is the
//! mean over radionuclides of the fraction of spectra whose label for that
//! radionuclide is correct (equivalently the fraction of correct cells), and
//! recall is the fraction of spectra truly containing the radionuclide where
//! it was found. Quantification compares estimated mixing weights against the
//! generating weights (mean squared error) and estimated counts against true
//! counts on the truly present radionuclides (relative absolute error).
//! Binned variants slice the same computations by true total counts, by the
//! number of active sources, or by the variability parameter; bins with no
//! spectra are omitted.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;

/// Everything the evaluator needs to know about one spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub index: usize,
    /// True total counts in the spectrum (all sources plus background).
    pub total_counts: f64,
    /// True number of active radionuclides.
    pub n_active: usize,
    /// Physical variability parameter the spectrum was generated with.
    pub param: Option<f64>,
    /// Truth per radionuclide (background excluded).
    pub true_labels: Vec<bool>,
    /// Prediction per radionuclide (background excluded).
    pub pred_labels: Vec<bool>,
    /// True counts per column, background first.
    pub true_counts: Vec<f64>,
    /// True mixing weights per column, background first (non-negative, sum 1).
    pub true_weights: Vec<f64>,
    /// Estimated counts per column, background first; `None` for methods
    /// that only produce labels.
    pub pred_counts: Option<Vec<f64>>,
}

impl EvalRecord {
    /// Estimated mixing weights: estimated counts normalised to sum 1.
    /// All-zero estimates stay all zero.
    pub fn pred_weights(&self) -> Option<Vec<f64>> {
        let pred = self.pred_counts.as_ref()?;
        let total: f64 = pred.iter().sum();
        if total > 0.0 {
            Some(pred.iter().map(|&p| p / total).collect())
        } else {
            Some(vec![0.0; pred.len()])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationMetrics {
    pub n_spectra: usize,
    /// Mean over radionuclides of the per-radionuclide label accuracy;
    /// equals the fraction of correct (spectrum, radionuclide) cells.
    pub accuracy: f64,
    /// Fraction of spectra where at least one absent radionuclide was called
    /// present.
    pub false_positive_rate: f64,
    /// Fraction of spectra where at least one present radionuclide was
    /// missed.
    pub false_negative_rate: f64,
    /// Fraction of spectra whose entire label vector is exactly right.
    pub perfect_prediction_rate: f64,
    /// Complement of the perfect-prediction rate, exactly.
    pub false_prediction_rate: f64,
    /// Per-radionuclide recall; `None` where the truth has no positives.
    pub recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantificationMetrics {
    /// Spectra that carried count estimates.
    pub n_spectra: usize,
    /// Mean over spectra with estimates of the mean squared difference
    /// between estimated and true mixing weights over every column
    /// (background included); `None` when nothing was estimated.
    pub mse_weights: Option<f64>,
    /// Mean over spectra of the mean relative absolute count error over the
    /// truly present radionuclides; spectra with no present radionuclide or
    /// without estimates do not contribute. `None` when no spectrum
    /// contributes.
    pub relative_absolute_error: Option<f64>,
}

fn check_consistent(records: &[EvalRecord]) -> Result<usize> {
    let Some(first) = records.first() else {
        return Err(Error::invalid("metrics", "no records"));
    };
    let k = first.true_labels.len();
    for r in records {
        if r.pred_labels.len() != k || r.true_labels.len() != k {
            return Err(Error::Dimension {
                context: format!("labels of record {}", r.index),
                expected: k,
                got: r.pred_labels.len(),
            });
        }
        if r.true_counts.len() != k + 1 {
            return Err(Error::Dimension {
                context: format!("true counts of record {}", r.index),
                expected: k + 1,
                got: r.true_counts.len(),
            });
        }
        if r.true_weights.len() != k + 1 {
            return Err(Error::Dimension {
                context: format!("true weights of record {}", r.index),
                expected: k + 1,
                got: r.true_weights.len(),
            });
        }
        if let Some(p) = &r.pred_counts {
            if p.len() != k + 1 {
                return Err(Error::Dimension {
                    context: format!("estimated counts of record {}", r.index),
                    expected: k + 1,
                    got: p.len(),
                });
            }
        }
    }
    Ok(k)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Spectrum-level rates plus per-radionuclide accuracy and recall.
pub fn identification_metrics(records: &[EvalRecord]) -> Result<IdentificationMetrics> {
    let k = check_consistent(records)?;
    let total = records.len() as u64;
    let mut correct_cells = 0u64;
    let mut with_fp = 0u64;
    let mut with_fn = 0u64;
    let mut perfect = 0u64;
    let mut col_tp = vec![0u64; k];
    let mut col_pos = vec![0u64; k];
    for r in records {
        let mut any_fp = false;
        let mut any_fn = false;
        for j in 0..k {
            match (r.true_labels[j], r.pred_labels[j]) {
                (true, true) => {
                    correct_cells += 1;
                    col_tp[j] += 1;
                    col_pos[j] += 1;
                }
                (true, false) => {
                    any_fn = true;
                    col_pos[j] += 1;
                }
                (false, true) => any_fp = true,
                (false, false) => correct_cells += 1,
            }
        }
        if any_fp {
            with_fp += 1;
        }
        if any_fn {
            with_fn += 1;
        }
        if !any_fp && !any_fn {
            perfect += 1;
        }
    }
    let ppr = perfect as f64 / total as f64;
    // The complement form `1 - (total - n) / total` equals `n / total` up to
    // one rounding and makes the orderings exact in floating point: spectra
    // with a false call are never perfect, so `total - n >= perfect` as
    // integers, and both division and subtraction from 1 are monotone. The
    // false-prediction rate is the literal complement of the perfect rate.
    let ppr_complement = |n: u64| 1.0 - (total - n) as f64 / total as f64;
    Ok(IdentificationMetrics {
        n_spectra: records.len(),
        accuracy: correct_cells as f64 / (total * k as u64) as f64,
        false_positive_rate: ppr_complement(with_fp),
        false_negative_rate: ppr_complement(with_fn),
        perfect_prediction_rate: ppr,
        false_prediction_rate: 1.0 - ppr,
        recall: col_tp
            .iter()
            .zip(&col_pos)
            .map(|(&t, &p)| ratio(t, p))
            .collect(),
    })
}

/// Weight- and count-error metrics over the records that carry estimates.
pub fn quantification_metrics(records: &[EvalRecord]) -> Result<QuantificationMetrics> {
    let k = check_consistent(records)?;
    let n_cols = (k + 1) as f64;
    let mut mse_sum = 0.0;
    let mut rae_sum = 0.0;
    let mut rae_spectra = 0usize;
    let mut n_spectra = 0usize;
    for r in records {
        let Some(pred) = &r.pred_counts else { continue };
        let pred_w = r.pred_weights().expect("pred_counts present");
        n_spectra += 1;
        let mut sq = 0.0;
        for (w_hat, w) in pred_w.iter().zip(&r.true_weights) {
            sq += (w_hat - w) * (w_hat - w);
        }
        mse_sum += sq / n_cols;

        let mut rel = 0.0;
        let mut present = 0usize;
        for (idx, &label) in r.true_labels.iter().enumerate() {
            if !label {
                continue;
            }
            let t = r.true_counts[idx + 1]; // count columns lead with background
            if t <= 0.0 {
                return Err(Error::invalid(
                    "true counts",
                    format!(
                        "record {}: radionuclide {idx} is labelled present with {t} counts",
                        r.index,
                    ),
                ));
            }
            rel += (pred[idx + 1] - t).abs() / t;
            present += 1;
        }
        if present > 0 {
            rae_sum += rel / present as f64;
            rae_spectra += 1;
        }
    }
    Ok(QuantificationMetrics {
        n_spectra,
        mse_weights: (n_spectra > 0).then(|| mse_sum / n_spectra as f64),
        relative_absolute_error: (rae_spectra > 0).then(|| rae_sum / rae_spectra as f64),
    })
}

/// Relative count errors of the cells whose true counts reach `min_true`,
/// over records carrying estimates. Background is a column like any other.
pub fn relative_count_errors(records: &[EvalRecord], min_true: f64) -> Vec<f64> {
    let mut errors = Vec::new();
    for r in records {
        let Some(pred) = &r.pred_counts else { continue };
        for (t, p) in r.true_counts.iter().zip(pred) {
            if *t >= min_true {
                errors.push((p - t).abs() / t);
            }
        }
    }
    errors
}

/// `n` geometric bins from `lo` to `hi`: `n + 1` edges.
pub fn log_spaced_edges(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n == 0 {
        return Err(Error::invalid(
            "bin edges",
            format!("need 0 < lo < hi and n >= 1, got lo={lo}, hi={hi}, n={n}"),
        ));
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..=n)
        .map(|i| (llo + (lhi - llo) * i as f64 / n as f64).exp())
        .collect())
}

/// Metrics for the records falling in one half-open bin `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedMetrics {
    pub lo: f64,
    pub hi: f64,
    pub metrics: IdentificationMetrics,
}

/// Slice records by `key` into half-open bins (the last bin closed at the
/// top) and evaluate each; empty bins are omitted.
pub fn binned_identification<F>(
    records: &[EvalRecord],
    edges: &[f64],
    key: F,
) -> Result<Vec<BinnedMetrics>>
where
    F: Fn(&EvalRecord) -> Option<f64>,
{
    if edges.len() < 2 {
        return Err(Error::invalid("bin edges", "need at least two edges"));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("bin edges", "edges must increase"));
    }
    let last = edges.len() - 2;
    let mut bins: Vec<Vec<EvalRecord>> = vec![Vec::new(); edges.len() - 1];
    for r in records {
        let Some(v) = key(r) else { continue };
        for b in 0..=last {
            let inside = v >= edges[b] && (v < edges[b + 1] || (b == last && v <= edges[b + 1]));
            if inside {
                bins[b].push(r.clone());
                break;
            }
        }
    }
    let mut out = Vec::new();
    for (b, members) in bins.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        out.push(BinnedMetrics {
            lo: edges[b],
            hi: edges[b + 1],
            metrics: identification_metrics(members)?,
        });
    }
    Ok(out)
}

/// Group by the exact number of active radionuclides.
pub fn binned_by_active(records: &[EvalRecord]) -> Result<Vec<(usize, IdentificationMetrics)>> {
    let mut groups: BTreeMap<usize, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.n_active).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, members)| Ok((k, identification_metrics(&members)?)))
        .collect()
}

/// One point of a per-radionuclide recall curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallPoint {
    pub lo: f64,
    pub hi: f64,
    /// Spectra in the bin where this radionuclide is truly present.
    pub n_present: usize,
    pub recall: f64,
}

/// Recall per radionuclide across count bins. Bins where a radionuclide is
/// never present contribute no point to its curve.
pub fn recall_curves(
    records: &[EvalRecord],
    names: &[String],
    edges: &[f64],
) -> Result<BTreeMap<String, Vec<RecallPoint>>> {
    let k = check_consistent(records)?;
    if names.len() != k {
        return Err(Error::Dimension {
            context: "radionuclide names".into(),
            expected: k,
            got: names.len(),
        });
    }
    let binned = binned_identification(records, edges, |r| Some(r.total_counts))?;
    let mut curves: BTreeMap<String, Vec<RecallPoint>> = BTreeMap::new();
    for bin in &binned {
        for (j, rec) in bin.metrics.recall.iter().enumerate() {
            let Some(recall) = rec else { continue };
            // Count the positives backing this point.
            let n_present = records
                .iter()
                .filter(|r| {
                    r.true_labels[j]
                        && r.total_counts >= bin.lo
                        && (r.total_counts < bin.hi
                            || (bin.hi == *edges.last().unwrap() && r.total_counts <= bin.hi))
                })
                .count();
            curves
                .entry(names[j].clone())
                .or_default()
                .push(RecallPoint {
                    lo: bin.lo,
                    hi: bin.hi,
                    n_present,
                    recall: *recall,
                });
        }
    }
    Ok(curves)
}

/// Full evaluation document, ready for serialization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_spectra: usize,
    pub radionuclides: Vec<String>,
    pub identification: IdentificationMetrics,
    pub recall_by_radionuclide: BTreeMap<String, Option<f64>>,
    pub quantification: QuantificationMetrics,
    pub by_total_counts: Vec<BinnedMetrics>,
    pub by_n_active: Vec<(usize, IdentificationMetrics)>,
    /// Present only when the records carry a variability parameter.
    pub by_param: Vec<BinnedMetrics>,
    pub recall_curves: BTreeMap<String, Vec<RecallPoint>>,
}

/// How to slice the report.
#[derive(Debug, Clone)]
pub struct BinningSpec {
    pub count_edges: Vec<f64>,
    /// Edges for the variability parameter; ignored when records carry none.
    pub param_edges: Option<Vec<f64>>,
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            count_edges: log_spaced_edges(100.0, 1e5, 6).expect("static edges"),
            param_edges: None,
        }
    }
}

pub fn build_report(
    records: &[EvalRecord],
    names: &[String],
    binning: &BinningSpec,
) -> Result<MetricsReport> {
    let identification = identification_metrics(records)?;
    let quantification = quantification_metrics(records)?;
    let recall_by_radionuclide = names
        .iter()
        .cloned()
        .zip(identification.recall.iter().cloned())
        .collect();
    let by_total_counts =
        binned_identification(records, &binning.count_edges, |r| Some(r.total_counts))?;
    let by_n_active = binned_by_active(records)?;
    let by_param = match &binning.param_edges {
        Some(edges) if records.iter().any(|r| r.param.is_some()) => {
            binned_identification(records, edges, |r| r.param)?
        }
        _ => Vec::new(),
    };
    let curves = recall_curves(records, names, &binning.count_edges)?;
    Ok(MetricsReport {
        n_spectra: records.len(),
        radionuclides: names.to_vec(),
        identification,
        recall_by_radionuclide,
        quantification,
        by_total_counts,
        by_n_active,
        by_param,
        recall_curves: curves,
    })
}
