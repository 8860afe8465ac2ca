//! Spectral-variability models: signature families indexed by one scalar.
//!
//! Two mechanisms are supported. A [`SignatureManifold`] interpolates between
//! tabulated library snapshots along a normalised latent coordinate (e.g.
//! shapes measured behind increasing shielding thickness). A [`ShiftModel`]
//! applies a multiplicative gain error to the energy axis of a reference
//! library by redistributing quantised counts into displaced channels.

use crate::error::{Error, Result};
use crate::signature::{self, ChannelGrid, SignatureLibrary};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::fs;
use std::path::Path;

/// Which variability mechanism a fit or a dataset assumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variability {
    #[default]
    None,
    Manifold,
    Shift,
}

impl std::fmt::Display for Variability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variability::None => "none",
            Variability::Manifold => "manifold",
            Variability::Shift => "shift",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variability::None),
            "manifold" => Ok(Variability::Manifold),
            "shift" => Ok(Variability::Shift),
            other => Err(Error::invalid(
                "variability",
                format!("{other:?} (expected none, manifold, or shift)"),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifold of tabulated snapshots
// ---------------------------------------------------------------------------

/// A one-parameter family of signature libraries, tabulated at increasing
/// physical parameter values and interpolated linearly in a latent coordinate.
///
/// The latent coordinate of snapshot `p` is its log-parameter position
/// normalised to `[0, 1]`:
/// `lambda_p = (ln t_p - ln t_0) / (ln t_last - ln t_0)`.
#[derive(Debug, Clone)]
pub struct SignatureManifold {
    snapshots: Vec<SignatureLibrary>,
    param_values: Vec<f64>,
    knots: Vec<f64>,
}

impl SignatureManifold {
    pub fn new(snapshots: Vec<SignatureLibrary>, param_values: Vec<f64>) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::invalid("manifold", "need at least two snapshots"));
        }
        if snapshots.len() != param_values.len() {
            return Err(Error::Dimension {
                context: "manifold parameter values".into(),
                expected: snapshots.len(),
                got: param_values.len(),
            });
        }
        for w in param_values.windows(2) {
            // partial_cmp so NaN fails the ordering check instead of passing it.
            if w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::invalid(
                    "manifold",
                    "parameter values must be strictly increasing",
                ));
            }
        }
        if !(param_values[0].is_finite() && param_values[0] > 0.0) {
            return Err(Error::invalid(
                "manifold",
                "parameter values must be positive (log spacing)",
            ));
        }
        let first = &snapshots[0];
        for (p, snap) in snapshots.iter().enumerate().skip(1) {
            if snap.grid() != first.grid() {
                return Err(Error::invalid(
                    "manifold",
                    format!("snapshot {p} grid differs"),
                ));
            }
            if snap.names() != first.names() {
                return Err(Error::invalid(
                    "manifold",
                    format!("snapshot {p} names differ"),
                ));
            }
        }
        let lo = param_values[0].ln();
        let hi = param_values[param_values.len() - 1].ln();
        let span = hi - lo;
        let knots = param_values.iter().map(|&t| (t.ln() - lo) / span).collect();
        Ok(SignatureManifold {
            snapshots,
            param_values,
            knots,
        })
    }

    pub fn grid(&self) -> ChannelGrid {
        self.snapshots[0].grid()
    }

    pub fn names(&self) -> &[String] {
        self.snapshots[0].names()
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshots.len()
    }

    pub fn param_values(&self) -> &[f64] {
        &self.param_values
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn snapshot(&self, p: usize) -> &SignatureLibrary {
        &self.snapshots[p]
    }

    /// Latent coordinate of a physical parameter value (inside the tabulated
    /// range).
    pub fn lambda_for_param(&self, param: f64) -> Result<f64> {
        let (lo, hi) = (
            self.param_values[0],
            self.param_values[self.param_values.len() - 1],
        );
        if !(param >= lo && param <= hi) {
            return Err(Error::OutOfRange {
                what: "manifold parameter".into(),
                value: param,
                lo,
                hi,
            });
        }
        Ok((param.ln() - lo.ln()) / (hi.ln() - lo.ln()))
    }

    /// Physical parameter value at a latent coordinate in `[0, 1]`.
    pub fn param_for_lambda(&self, lambda: f64) -> Result<f64> {
        check_unit_interval(lambda)?;
        let (lo, hi) = (
            self.param_values[0],
            self.param_values[self.param_values.len() - 1],
        );
        Ok((lo.ln() + lambda * (hi.ln() - lo.ln())).exp())
    }

    /// Interpolated library at latent coordinate `lambda` in `[0, 1]`:
    /// channel-wise linear blend of the bracketing snapshots, columns
    /// renormalised. At a knot this reproduces the tabulated snapshot.
    pub fn eval(&self, lambda: f64) -> Result<SignatureLibrary> {
        check_unit_interval(lambda)?;
        let seg = self.segment(lambda);
        let (k0, k1) = (self.knots[seg], self.knots[seg + 1]);
        let w = (lambda - k0) / (k1 - k0);
        let a = self.snapshots[seg].matrix();
        let b = self.snapshots[seg + 1].matrix();
        let blended: Array2<f64> = a * (1.0 - w) + b * w;
        SignatureLibrary::from_columns(self.grid(), self.names().to_vec(), blended)
    }

    fn segment(&self, lambda: f64) -> usize {
        let seg = self.knots.partition_point(|&k| k <= lambda);
        seg.clamp(1, self.knots.len() - 1) - 1
    }

    /// Single interpolated column, written into `out` without building the
    /// whole library. Matches [`SignatureManifold::eval`] including its
    /// renormalise-only-on-drift behaviour.
    pub fn eval_column_into(&self, lambda: f64, col: usize, out: &mut [f64]) -> Result<()> {
        check_unit_interval(lambda)?;
        let m = self.grid().n_channels;
        if col >= self.names().len() {
            return Err(Error::Dimension {
                context: "manifold column".into(),
                expected: self.names().len(),
                got: col,
            });
        }
        if out.len() != m {
            return Err(Error::Dimension {
                context: "manifold column buffer".into(),
                expected: m,
                got: out.len(),
            });
        }
        let seg = self.segment(lambda);
        let (k0, k1) = (self.knots[seg], self.knots[seg + 1]);
        let w = (lambda - k0) / (k1 - k0);
        let a = self.snapshots[seg].matrix();
        let b = self.snapshots[seg + 1].matrix();
        let mut sum = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            *o = a[(i, col)] * (1.0 - w) + b[(i, col)] * w;
            sum += *o;
        }
        if (sum - 1.0).abs() > signature::COLUMN_SUM_TOL {
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(())
    }

    /// Write the manifold as a directory: `manifest.json` (grid plus ordered
    /// parameter values) and one `<value>.csv` per snapshot.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ManifoldManifest {
            grid: self.grid(),
            param_values: self.param_values.clone(),
        };
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::invalid("manifold manifest", e.to_string()))?;
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
        for (snap, &value) in self.snapshots.iter().zip(&self.param_values) {
            let path = dir.join(format!("{value}.csv"));
            // Snapshot CSVs share the manifest grid; suppress per-file sidecars
            // by writing the body directly.
            let mut out = String::new();
            out.push_str(&snap.names().join(","));
            out.push('\n');
            for row in snap.matrix().rows() {
                let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Load a manifold directory written by [`SignatureManifold::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ManifoldManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let grid = ChannelGrid::new(
            manifest.grid.n_channels,
            manifest.grid.bin_width_kev,
            manifest.grid.e_min_kev,
        )?;
        let mut snapshots = Vec::with_capacity(manifest.param_values.len());
        for &value in &manifest.param_values {
            let path = dir.join(format!("{value}.csv"));
            snapshots.push(signature::load_csv_with_grid(&path, grid)?);
        }
        SignatureManifold::new(snapshots, manifest.param_values)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifoldManifest {
    grid: ChannelGrid,
    param_values: Vec<f64>,
}

/// Free-function form of [`SignatureManifold::eval`].
pub fn manifold_eval(manifold: &SignatureManifold, lambda: f64) -> Result<SignatureLibrary> {
    manifold.eval(lambda)
}

fn check_unit_interval(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            what: "latent coordinate".into(),
            value: lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Multiplicative gain shift
// ---------------------------------------------------------------------------

/// Gain-shift model: a measured energy `e_r` corresponds to the true energy
/// `e_s = e_r (1 - alpha)`. Shifted signatures are produced by quantising
/// each reference column into exactly `amplification` equally spaced energies
/// (apportioned per channel), scaling every energy by `1 - alpha`, and
/// histogramming back onto the grid (out-of-range energies are dropped, the
/// rest renormalised).
#[derive(Debug, Clone)]
pub struct ShiftModel {
    reference: SignatureLibrary,
    alpha_range: (f64, f64),
    amplification: u64,
    /// Quantised counts per signature: each column sums to exactly
    /// `amplification`, with every channel within one count of `X_ij * A`.
    quantized: Vec<Vec<u64>>,
}

pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (-0.10, 0.10);
pub const DEFAULT_AMPLIFICATION: u64 = 1_000_000;
const MIN_AMPLIFICATION: u64 = 1_000;

impl ShiftModel {
    pub fn new(
        reference: SignatureLibrary,
        alpha_range: (f64, f64),
        amplification: u64,
    ) -> Result<Self> {
        let (lo, hi) = alpha_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(
                "alpha_range",
                format!("({lo}, {hi}) must satisfy lo <= hi < 1"),
            ));
        }
        if amplification < MIN_AMPLIFICATION {
            return Err(Error::invalid(
                "amplification",
                format!("{amplification} < minimum {MIN_AMPLIFICATION}"),
            ));
        }
        let amp = amplification as f64;
        let mut quantized = Vec::with_capacity(reference.n_signatures());
        for j in 0..reference.n_signatures() {
            // Largest-remainder apportionment of exactly `amplification`
            // counts: independent rounding would let the column total drift,
            // and renormalising by a drifted total perturbs every channel in
            // proportion to its mass. With an exact total, a zero shift
            // reproduces the reference to within 1/amplification per channel.
            let col = reference.column(j);
            let mut counts = Vec::with_capacity(col.len());
            let mut remainders = Vec::with_capacity(col.len());
            let mut assigned = 0u64;
            for (i, &c) in col.iter().enumerate() {
                let exact = c * amp;
                let base = exact.floor();
                counts.push(base as u64);
                assigned += base as u64;
                remainders.push((exact - base, i));
            }
            remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let missing = amplification.saturating_sub(assigned) as usize;
            for t in 0..missing {
                counts[remainders[t % remainders.len()].1] += 1;
            }
            quantized.push(counts);
        }
        Ok(ShiftModel {
            reference,
            alpha_range,
            amplification,
            quantized,
        })
    }

    pub fn with_defaults(reference: SignatureLibrary) -> Result<Self> {
        ShiftModel::new(reference, DEFAULT_ALPHA_RANGE, DEFAULT_AMPLIFICATION)
    }

    pub fn reference(&self) -> &SignatureLibrary {
        &self.reference
    }

    pub fn alpha_range(&self) -> (f64, f64) {
        self.alpha_range
    }

    pub fn amplification(&self) -> u64 {
        self.amplification
    }

    pub fn grid(&self) -> ChannelGrid {
        self.reference.grid()
    }

    pub fn names(&self) -> &[String] {
        self.reference.names()
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if !(alpha >= lo && alpha <= hi) {
            return Err(Error::OutOfRange {
                what: "alpha".into(),
                value: alpha,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Shifted, renormalised column `signature_index` at gain error `alpha`.
    pub fn shift_signature(&self, signature_index: usize, alpha: f64) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.grid().n_channels);
        self.shift_signature_into(signature_index, alpha, out.as_slice_mut().unwrap())?;
        Ok(out)
    }

    /// As [`ShiftModel::shift_signature`], but written into a caller buffer.
    pub fn shift_signature_into(
        &self,
        signature_index: usize,
        alpha: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_alpha(alpha)?;
        if signature_index >= self.reference.n_signatures() {
            return Err(Error::Dimension {
                context: "signature index".into(),
                expected: self.reference.n_signatures(),
                got: signature_index,
            });
        }
        if out.len() != self.grid().n_channels {
            return Err(Error::Dimension {
                context: "shift column buffer".into(),
                expected: self.grid().n_channels,
                got: out.len(),
            });
        }
        let (hist, _dropped) =
            shifted_histogram(&self.quantized[signature_index], self.grid(), alpha);
        let kept: u64 = hist.iter().sum();
        if kept == 0 {
            return Err(Error::EmptyShift {
                col: signature_index,
                alpha,
            });
        }
        let total = kept as f64;
        for (o, &c) in out.iter_mut().zip(&hist) {
            *o = c as f64 / total;
        }
        Ok(())
    }

    /// Whole library at gain error `alpha` (same names and grid).
    pub fn shift_library(&self, alpha: f64) -> Result<SignatureLibrary> {
        let n = self.reference.n_signatures();
        let m = self.grid().n_channels;
        let mut matrix = Array2::zeros((m, n));
        for j in 0..n {
            let col = self.shift_signature(j, alpha)?;
            matrix.column_mut(j).assign(&col);
        }
        SignatureLibrary::from_columns(self.grid(), self.names().to_vec(), matrix)
    }
}

/// Free-function form of [`ShiftModel::shift_signature`].
pub fn shift_signature(
    model: &ShiftModel,
    signature_index: usize,
    alpha: f64,
) -> Result<Array1<f64>> {
    model.shift_signature(signature_index, alpha)
}

/// Materialise the quantised energy list of a normalised signature column:
/// channel `i` contributes `round(c_i * amplification)` energies starting at
/// its lower edge, spaced `bin_width / count`.
pub fn energy_list_from_signature(
    column: &[f64],
    grid: ChannelGrid,
    amplification: u64,
) -> Result<Vec<f64>> {
    if amplification < MIN_AMPLIFICATION {
        return Err(Error::invalid(
            "amplification",
            format!("{amplification} < minimum {MIN_AMPLIFICATION}"),
        ));
    }
    if column.len() != grid.n_channels {
        return Err(Error::Dimension {
            context: "signature column".into(),
            expected: grid.n_channels,
            got: column.len(),
        });
    }
    let sum: f64 = column.iter().sum();
    if column.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(
            "signature column",
            "must be non-negative and normalised",
        ));
    }
    let amp = amplification as f64;
    let mut energies = Vec::with_capacity(amplification as usize + grid.n_channels / 2 + 1);
    for (i, &c) in column.iter().enumerate() {
        let s = (c * amp).round() as u64;
        if s == 0 {
            continue;
        }
        let lo = grid.lower_edge(i);
        let d = grid.bin_width_kev / s as f64;
        for k in 0..s {
            energies.push(lo + k as f64 * d);
        }
    }
    Ok(energies)
}

/// Histogram the quantised counts of one column after scaling every energy by
/// `1 - alpha`. Returns per-channel counts plus the number of counts dropped
/// outside the grid; `kept + dropped` equals the input total exactly.
///
/// Instead of materialising the energy list, this walks each source channel's
/// arithmetic progression of energies analytically: within channel `i` the
/// scaled energies are increasing, so the counts falling into each target bin
/// are differences of boundary-crossing indices.
fn shifted_histogram(counts: &[u64], grid: ChannelGrid, alpha: f64) -> (Vec<u64>, u64) {
    let scale = 1.0 - alpha;
    let m = grid.n_channels;
    let w = grid.bin_width_kev;
    let e_min = grid.e_min_kev;
    let mut hist = vec![0u64; m];
    let mut dropped = 0u64;

    let deposit = |bin: i64, n: u64, hist: &mut Vec<u64>, dropped: &mut u64| {
        if n == 0 {
            return;
        }
        if bin >= 0 && (bin as usize) < m {
            hist[bin as usize] += n;
        } else {
            *dropped += n;
        }
    };

    for (i, &s) in counts.iter().enumerate() {
        if s == 0 {
            continue;
        }
        let lo = grid.lower_edge(i);
        let d = w / s as f64;
        let u_first = lo * scale;
        let u_last = (lo + (s - 1) as f64 * d) * scale;
        let t_lo = ((u_first - e_min) / w).floor() as i64;
        let t_hi = ((u_last - e_min) / w).floor() as i64;
        if t_lo == t_hi {
            deposit(t_lo, s, &mut hist, &mut dropped);
            continue;
        }
        let mut prev_k = 0u64;
        for t in t_lo..t_hi {
            // First k whose scaled energy reaches the upper boundary of bin t.
            // An energy exactly on the boundary belongs to the higher bin, so
            // ceil is the correct crossing index even when x is integral.
            let b = e_min + (t + 1) as f64 * w;
            let x = ((b / scale - lo) / d).ceil();
            let k = if x <= 0.0 {
                0
            } else if x >= s as f64 {
                s
            } else {
                x as u64
            };
            let k = k.max(prev_k);
            deposit(t, k - prev_k, &mut hist, &mut dropped);
            prev_k = k;
        }
        deposit(t_hi, s - prev_k, &mut hist, &mut dropped);
    }
    (hist, dropped)
}

// ---------------------------------------------------------------------------
// Unified source of (possibly parametric) signature libraries
// ---------------------------------------------------------------------------

/// Where fits and simulations obtain their signature matrix: a fixed library,
/// a manifold evaluated at a latent coordinate, or a gain-shift model
/// evaluated at an alpha.
#[derive(Debug, Clone)]
pub enum SignatureSource {
    Fixed(SignatureLibrary),
    Manifold(SignatureManifold),
    Shift(ShiftModel),
}

impl SignatureSource {
    pub fn variability(&self) -> Variability {
        match self {
            SignatureSource::Fixed(_) => Variability::None,
            SignatureSource::Manifold(_) => Variability::Manifold,
            SignatureSource::Shift(_) => Variability::Shift,
        }
    }

    pub fn grid(&self) -> ChannelGrid {
        match self {
            SignatureSource::Fixed(lib) => lib.grid(),
            SignatureSource::Manifold(man) => man.grid(),
            SignatureSource::Shift(model) => model.grid(),
        }
    }

    pub fn names(&self) -> &[String] {
        match self {
            SignatureSource::Fixed(lib) => lib.names(),
            SignatureSource::Manifold(man) => man.names(),
            SignatureSource::Shift(model) => model.names(),
        }
    }

    pub fn n_signatures(&self) -> usize {
        self.names().len()
    }

    /// Admissible range of the scalar parameter, if the source has one.
    /// Manifolds use the latent coordinate `[0, 1]`; shift models their alpha
    /// range.
    pub fn param_bounds(&self) -> Option<(f64, f64)> {
        match self {
            SignatureSource::Fixed(_) => None,
            SignatureSource::Manifold(_) => Some((0.0, 1.0)),
            SignatureSource::Shift(model) => Some(model.alpha_range()),
        }
    }

    /// Concrete library at `param` (`None` for a fixed library).
    pub fn realize(&self, param: Option<f64>) -> Result<Cow<'_, SignatureLibrary>> {
        match (self, param) {
            (SignatureSource::Fixed(lib), None) => Ok(Cow::Borrowed(lib)),
            (SignatureSource::Fixed(_), Some(_)) => Err(Error::invalid(
                "parameter",
                "fixed library takes no parameter",
            )),
            (SignatureSource::Manifold(man), Some(lambda)) => Ok(Cow::Owned(man.eval(lambda)?)),
            (SignatureSource::Shift(model), Some(alpha)) => {
                Ok(Cow::Owned(model.shift_library(alpha)?))
            }
            (_, None) => Err(Error::invalid(
                "parameter",
                "parametric source requires a parameter value",
            )),
        }
    }

    /// Single library column at `param`, written into `out`. Produces the same
    /// values as `realize(param)?.column(col)` without building the whole
    /// library; fitting loops use it to evaluate parameter candidates cheaply.
    pub fn realize_column_into(
        &self,
        col: usize,
        param: Option<f64>,
        out: &mut [f64],
    ) -> Result<()> {
        match (self, param) {
            (SignatureSource::Fixed(lib), None) => {
                if col >= lib.n_signatures() {
                    return Err(Error::Dimension {
                        context: "library column".into(),
                        expected: lib.n_signatures(),
                        got: col,
                    });
                }
                if out.len() != lib.n_channels() {
                    return Err(Error::Dimension {
                        context: "library column buffer".into(),
                        expected: lib.n_channels(),
                        got: out.len(),
                    });
                }
                for (o, &v) in out.iter_mut().zip(lib.column(col)) {
                    *o = v;
                }
                Ok(())
            }
            (SignatureSource::Fixed(_), Some(_)) => Err(Error::invalid(
                "parameter",
                "fixed library takes no parameter",
            )),
            (SignatureSource::Manifold(man), Some(lambda)) => {
                man.eval_column_into(lambda, col, out)
            }
            (SignatureSource::Shift(model), Some(alpha)) => {
                model.shift_signature_into(col, alpha, out)
            }
            (_, None) => Err(Error::invalid(
                "parameter",
                "parametric source requires a parameter value",
            )),
        }
    }

    /// Physical meaning of a solver-space parameter: thickness for manifolds,
    /// alpha for shift models.
    pub fn physical_param(&self, param: f64) -> Result<f64> {
        match self {
            SignatureSource::Fixed(_) => Err(Error::invalid(
                "parameter",
                "fixed library has no parameter",
            )),
            SignatureSource::Manifold(man) => man.param_for_lambda(param),
            SignatureSource::Shift(_) => Ok(param),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn tiny_grid(m: usize) -> ChannelGrid {
        ChannelGrid::new(m, 2.0, 20.0).unwrap()
    }

    fn lib_from(grid: ChannelGrid, cols: &[&[f64]]) -> SignatureLibrary {
        let m = grid.n_channels;
        let n = cols.len();
        let mut matrix = Array2::zeros((m, n));
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                matrix[(i, j)] = v;
            }
        }
        let names = (0..n).map(|j| format!("s{j}")).collect();
        SignatureLibrary::from_columns(grid, names, matrix).unwrap()
    }

    #[test]
    fn knots_are_normalised_log_positions() {
        let g = tiny_grid(2);
        let a = lib_from(g, &[&[1.0, 0.0]]);
        let b = lib_from(g, &[&[0.5, 0.5]]);
        let c = lib_from(g, &[&[0.0, 1.0]]);
        let man = SignatureManifold::new(vec![a, b, c], vec![0.1, 1.0, 10.0]).unwrap();
        assert_abs_diff_eq!(man.knots()[0], 0.0);
        assert_abs_diff_eq!(man.knots()[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(man.knots()[2], 1.0);
        assert_abs_diff_eq!(man.param_for_lambda(0.5).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(man.lambda_for_param(10.0).unwrap(), 1.0);
    }

    #[test]
    fn two_snapshot_blend_is_convex_combination() {
        let g = tiny_grid(2);
        let a = lib_from(g, &[&[1.0, 0.0]]);
        let b = lib_from(g, &[&[0.0, 1.0]]);
        let man = SignatureManifold::new(vec![a, b], vec![1.0, 10.0]).unwrap();
        let lib = man.eval(0.25).unwrap();
        assert_abs_diff_eq!(lib.matrix()[(0, 0)], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(lib.matrix()[(1, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn eval_at_knot_reproduces_snapshot_bitwise() {
        let g = tiny_grid(3);
        let a = lib_from(g, &[&[0.2, 0.3, 0.5], &[0.6, 0.3, 0.1]]);
        let b = lib_from(g, &[&[0.1, 0.1, 0.8], &[0.3, 0.3, 0.4]]);
        let c = lib_from(g, &[&[0.4, 0.4, 0.2], &[0.2, 0.5, 0.3]]);
        let man =
            SignatureManifold::new(vec![a.clone(), b.clone(), c.clone()], vec![0.5, 2.0, 8.0])
                .unwrap();
        for (p, snap) in [a, b, c].iter().enumerate() {
            let lib = man.eval(man.knots()[p]).unwrap();
            assert_eq!(lib.matrix(), snap.matrix(), "snapshot {p}");
        }
    }

    #[test]
    fn column_fast_path_matches_full_realization() {
        // Manifold and shift sources: realize_column_into must reproduce the
        // corresponding column of the fully realized library bit-for-bit.
        let g = tiny_grid(6);
        let a = lib_from(
            g,
            &[
                &[0.2, 0.3, 0.1, 0.1, 0.2, 0.1],
                &[0.5, 0.1, 0.1, 0.1, 0.1, 0.1],
            ],
        );
        let b = lib_from(
            g,
            &[
                &[0.1, 0.1, 0.4, 0.2, 0.1, 0.1],
                &[0.1, 0.2, 0.3, 0.2, 0.1, 0.1],
            ],
        );
        let man = SignatureManifold::new(vec![a.clone(), b], vec![1.0, 4.0]).unwrap();
        let sources = [
            SignatureSource::Manifold(man),
            SignatureSource::Shift(ShiftModel::with_defaults(a).unwrap()),
        ];
        for source in &sources {
            let (lo, hi) = source.param_bounds().unwrap();
            for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
                let p = lo + t * (hi - lo);
                let full = source.realize(Some(p)).unwrap();
                let mut buf = vec![0.0; g.n_channels];
                for j in 0..source.n_signatures() {
                    source.realize_column_into(j, Some(p), &mut buf).unwrap();
                    for (i, &v) in buf.iter().enumerate() {
                        assert_eq!(v, full.matrix()[(i, j)], "col {j} channel {i} param {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn eval_is_lipschitz_between_knots() {
        let g = tiny_grid(4);
        let a = lib_from(g, &[&[0.7, 0.1, 0.1, 0.1]]);
        let b = lib_from(g, &[&[0.1, 0.7, 0.1, 0.1]]);
        let c = lib_from(g, &[&[0.1, 0.1, 0.1, 0.7]]);
        let man = SignatureManifold::new(vec![a, b, c], vec![1.0, 3.0, 9.0]).unwrap();
        // Lipschitz constant: max snapshot difference over knot spacing.
        let mut lip: f64 = 0.0;
        for p in 0..2 {
            let d = (man.snapshot(p + 1).matrix() - man.snapshot(p).matrix())
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            lip = lip.max(d / (man.knots()[p + 1] - man.knots()[p]));
        }
        let pairs = [(0.10, 0.11), (0.49, 0.50), (0.52, 0.80), (0.0, 1.0)];
        for (l1, l2) in pairs {
            let x1 = man.eval(l1).unwrap();
            let x2 = man.eval(l2).unwrap();
            let diff = (x2.matrix() - x1.matrix())
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!(
                diff <= lip * (l2 - l1).abs() + 1e-9,
                "diff {diff} exceeds Lipschitz bound for ({l1}, {l2})"
            );
        }
    }

    #[test]
    fn manifold_rejects_bad_construction_and_out_of_range_eval() {
        let g = tiny_grid(2);
        let a = lib_from(g, &[&[1.0, 0.0]]);
        let b = lib_from(g, &[&[0.0, 1.0]]);
        assert!(SignatureManifold::new(vec![a.clone()], vec![1.0]).is_err());
        assert!(SignatureManifold::new(vec![a.clone(), b.clone()], vec![2.0, 1.0]).is_err());
        assert!(SignatureManifold::new(vec![a.clone(), b.clone()], vec![-1.0, 1.0]).is_err());
        let man = SignatureManifold::new(vec![a, b], vec![1.0, 2.0]).unwrap();
        assert!(man.eval(-0.01).is_err());
        assert!(man.eval(1.01).is_err());
    }

    #[test]
    fn manifold_dir_round_trips() {
        let g = tiny_grid(3);
        let a = lib_from(g, &[&[0.2, 0.3, 0.5], &[0.6, 0.3, 0.1]]);
        let b = lib_from(g, &[&[0.1, 0.1, 0.8], &[0.3, 0.3, 0.4]]);
        let man = SignatureManifold::new(vec![a, b], vec![0.001, 30.0]).unwrap();
        let dir = tempdir().unwrap();
        man.save_dir(dir.path()).unwrap();
        let back = SignatureManifold::load_dir(dir.path()).unwrap();
        assert_eq!(back.param_values(), man.param_values());
        for p in 0..man.n_snapshots() {
            assert_eq!(back.snapshot(p).matrix(), man.snapshot(p).matrix());
        }
    }

    #[test]
    fn energy_list_matches_uniform_example() {
        let g = ChannelGrid::new(4, 2.0, 20.0).unwrap();
        let col = [0.25, 0.25, 0.25, 0.25];
        let list = energy_list_from_signature(&col, g, 1000).unwrap();
        assert_eq!(list.len(), 1000);
        // 250 energies per channel, starting at the lower edge, spaced w/250.
        assert_eq!(list[0], 20.0);
        assert_abs_diff_eq!(list[1] - list[0], 2.0 / 250.0, epsilon = 1e-15);
        assert_eq!(list[250], 22.0);
        assert!(list.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn energy_list_rejects_bad_input() {
        let g = ChannelGrid::new(4, 2.0, 20.0).unwrap();
        assert!(energy_list_from_signature(&[0.25; 4], g, 10).is_err());
        assert!(energy_list_from_signature(&[0.5; 4], g, 1000).is_err());
        assert!(energy_list_from_signature(&[0.25; 3], g, 1000).is_err());
    }

    /// Literal reference implementation: bin each materialised energy.
    fn naive_shift_histogram(
        column: &[f64],
        grid: ChannelGrid,
        amplification: u64,
        alpha: f64,
    ) -> (Vec<u64>, u64) {
        let energies = energy_list_from_signature(column, grid, amplification).unwrap();
        let mut hist = vec![0u64; grid.n_channels];
        let mut dropped = 0u64;
        for e in energies {
            match grid.channel_of(e * (1.0 - alpha)) {
                Some(ch) => hist[ch] += 1,
                None => dropped += 1,
            }
        }
        (hist, dropped)
    }

    #[test]
    fn fast_histogram_matches_literal_enumeration() {
        let g = ChannelGrid::new(32, 2.0, 20.0).unwrap();
        let mut col = vec![0.0f64; 32];
        // Lumpy column exercising multi-bin spreads.
        for (i, v) in col.iter_mut().enumerate() {
            *v = 1.0 + ((i as f64) * 0.7).sin().abs() * 3.0;
        }
        let total: f64 = col.iter().sum();
        col.iter_mut().for_each(|v| *v /= total);
        let amp = 10_000u64;
        let counts: Vec<u64> = col
            .iter()
            .map(|&c| (c * amp as f64).round() as u64)
            .collect();
        for &alpha in &[-0.093, -0.05, 0.0, 0.013, 0.05, 0.1] {
            let (fast, fast_dropped) = shifted_histogram(&counts, g, alpha);
            let (naive, naive_dropped) = naive_shift_histogram(&col, g, amp, alpha);
            let kept_fast: u64 = fast.iter().sum();
            let kept_naive: u64 = naive.iter().sum();
            assert_eq!(kept_fast + fast_dropped, kept_naive + naive_dropped);
            // Agreement up to floating-point edge coincidences.
            for (i, (&f, &n)) in fast.iter().zip(&naive).enumerate() {
                assert!(
                    f.abs_diff(n) <= 2,
                    "alpha {alpha}, bin {i}: fast {f} vs naive {n}"
                );
            }
        }
    }

    #[test]
    fn zero_alpha_reproduces_reference_within_quantisation() {
        let g = ChannelGrid::default();
        let col = crate::signature::synth_signature(g, &[(661.7, 1.0)], 0.065, 0.3).unwrap();
        let mut matrix = Array2::zeros((g.n_channels, 1));
        matrix.column_mut(0).assign(&col);
        let lib = SignatureLibrary::from_columns(g, vec!["Cs-137".into()], matrix).unwrap();
        let model = ShiftModel::with_defaults(lib.clone()).unwrap();
        let shifted = model.shift_signature(0, 0.0).unwrap();
        let bound = 2.0 / model.amplification() as f64;
        for i in 0..g.n_channels {
            let dev = (shifted[i] - lib.matrix()[(i, 0)]).abs();
            assert!(dev <= bound, "channel {i}: deviation {dev} > {bound}");
        }
    }

    #[test]
    fn positive_alpha_moves_spike_to_lower_channel() {
        let g = ChannelGrid::default();
        let mut matrix = Array2::zeros((g.n_channels, 1));
        matrix[(g.channel_of(662.0).unwrap(), 0)] = 1.0;
        let lib = SignatureLibrary::from_columns(g, vec!["spike".into()], matrix).unwrap();
        let model = ShiftModel::with_defaults(lib).unwrap();
        let shifted = model.shift_signature(0, 0.05).unwrap();
        let mode = shifted
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // 662 * 0.95 = 628.9 keV -> channel floor((628.9 - 20) / 2).
        assert_eq!(mode, 304);
        assert_abs_diff_eq!(shifted.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spike_mode_never_rises_with_alpha() {
        let g = ChannelGrid::default();
        let mut matrix = Array2::zeros((g.n_channels, 1));
        matrix[(g.channel_of(800.0).unwrap(), 0)] = 1.0;
        let lib = SignatureLibrary::from_columns(g, vec!["spike".into()], matrix).unwrap();
        let model = ShiftModel::with_defaults(lib).unwrap();
        let mut last_mode = usize::MAX;
        for &alpha in &[-0.10, -0.05, -0.01, 0.0, 0.01, 0.05, 0.10] {
            let shifted = model.shift_signature(0, alpha).unwrap();
            let mode = shifted
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(mode <= last_mode, "mode rose from {last_mode} to {mode}");
            last_mode = mode;
        }
    }

    #[test]
    fn shift_that_drops_everything_is_an_error() {
        // e_max = 28 keV; a 50% downward shift maps all energy below e_min.
        let g = ChannelGrid::new(4, 2.0, 20.0).unwrap();
        let lib = lib_from(g, &[&[0.25, 0.25, 0.25, 0.25]]);
        let model = ShiftModel::new(lib, (-0.6, 0.6), 1_000).unwrap();
        assert!(matches!(
            model.shift_signature(0, 0.5),
            Err(Error::EmptyShift { col: 0, .. })
        ));
    }

    #[test]
    fn shift_model_validates_inputs() {
        let g = tiny_grid(4);
        let lib = lib_from(g, &[&[0.25, 0.25, 0.25, 0.25]]);
        assert!(ShiftModel::new(lib.clone(), (0.2, 0.1), 1_000).is_err());
        assert!(ShiftModel::new(lib.clone(), (-0.1, 1.0), 1_000).is_err());
        assert!(ShiftModel::new(lib.clone(), (-0.1, 0.1), 10).is_err());
        let model = ShiftModel::new(lib, (-0.1, 0.1), 1_000).unwrap();
        assert!(model.shift_signature(0, 0.2).is_err());
        assert!(model.shift_signature(5, 0.0).is_err());
    }

    #[test]
    fn source_realize_dispatches_and_validates() {
        let g = tiny_grid(2);
        let lib = lib_from(g, &[&[0.5, 0.5]]);
        let fixed = SignatureSource::Fixed(lib.clone());
        assert!(fixed.realize(None).is_ok());
        assert!(fixed.realize(Some(0.1)).is_err());
        assert_eq!(fixed.param_bounds(), None);
        assert_eq!(fixed.variability(), Variability::None);

        let man = SignatureManifold::new(
            vec![lib.clone(), lib_from(g, &[&[0.25, 0.75]])],
            vec![1.0, 2.0],
        )
        .unwrap();
        let source = SignatureSource::Manifold(man);
        assert!(source.realize(Some(0.5)).is_ok());
        assert!(source.realize(None).is_err());
        assert_eq!(source.param_bounds(), Some((0.0, 1.0)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn energy_list_length_is_within_half_count_per_channel(
            raw in prop::collection::vec(0.01f64..1.0, 8),
        ) {
            let g = ChannelGrid::new(8, 2.0, 20.0).unwrap();
            let total: f64 = raw.iter().sum();
            let col: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let amp = 5_000u64;
            let list = energy_list_from_signature(&col, g, amp).unwrap();
            let bound = g.n_channels as f64 / 2.0;
            prop_assert!((list.len() as f64 - amp as f64).abs() <= bound);
        }

        #[test]
        fn shift_conserves_counts_exactly(
            raw in prop::collection::vec(0.01f64..1.0, 16),
            alpha in -0.1f64..0.1,
        ) {
            let g = ChannelGrid::new(16, 2.0, 20.0).unwrap();
            let total: f64 = raw.iter().sum();
            let counts: Vec<u64> = raw
                .iter()
                .map(|v| (v / total * 20_000.0).round() as u64)
                .collect();
            let input: u64 = counts.iter().sum();
            let (hist, dropped) = shifted_histogram(&counts, g, alpha);
            let kept: u64 = hist.iter().sum();
            prop_assert_eq!(kept + dropped, input);
        }
    }
}
