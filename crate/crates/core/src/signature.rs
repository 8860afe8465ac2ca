//! Signature libraries: per-channel detector responses on a shared energy grid.
//!
//! A library is an `M x N` column-stochastic matrix. Column `j` holds the
//! expected spectral shape of source `j`, normalised to unit total counts.
//! Column 0 is the ambient background by convention; the simulator and the
//! identification routines rely on that position.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Columns whose sums deviate from 1 by more than this are renormalised on
/// construction; anything closer is kept bit-for-bit, so a save/load round
/// trip reproduces the matrix exactly.
pub const COLUMN_SUM_TOL: f64 = 1e-9;

/// 2 sqrt(2 ln 2): converts a Gaussian FWHM to its standard deviation.
const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Uniform energy binning. Channel `i` covers the half-open interval
/// `[e_min + i w, e_min + (i+1) w)` in keV; an energy exactly on an edge
/// belongs to the higher channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGrid {
    pub n_channels: usize,
    pub bin_width_kev: f64,
    pub e_min_kev: f64,
}

impl Default for ChannelGrid {
    /// 1024 channels of 2 keV starting at a 20 keV low-energy cut-off.
    fn default() -> Self {
        ChannelGrid {
            n_channels: 1024,
            bin_width_kev: 2.0,
            e_min_kev: 20.0,
        }
    }
}

impl ChannelGrid {
    pub fn new(n_channels: usize, bin_width_kev: f64, e_min_kev: f64) -> Result<Self> {
        if n_channels == 0 {
            return Err(Error::invalid("grid", "n_channels must be positive"));
        }
        if !(bin_width_kev.is_finite() && bin_width_kev > 0.0) {
            return Err(Error::invalid("grid", "bin_width_kev must be positive"));
        }
        if !(e_min_kev.is_finite() && e_min_kev >= 0.0) {
            return Err(Error::invalid("grid", "e_min_kev must be non-negative"));
        }
        Ok(ChannelGrid {
            n_channels,
            bin_width_kev,
            e_min_kev,
        })
    }

    pub fn lower_edge(&self, channel: usize) -> f64 {
        self.e_min_kev + channel as f64 * self.bin_width_kev
    }

    pub fn upper_edge(&self, channel: usize) -> f64 {
        self.lower_edge(channel + 1)
    }

    pub fn center(&self, channel: usize) -> f64 {
        self.e_min_kev + (channel as f64 + 0.5) * self.bin_width_kev
    }

    pub fn e_max_kev(&self) -> f64 {
        self.lower_edge(self.n_channels)
    }

    /// Channel containing `energy_kev`, or `None` outside `[e_min, e_max)`.
    pub fn channel_of(&self, energy_kev: f64) -> Option<usize> {
        if !energy_kev.is_finite() || energy_kev < self.e_min_kev {
            return None;
        }
        let idx = ((energy_kev - self.e_min_kev) / self.bin_width_kev).floor();
        if idx >= 0.0 && (idx as usize) < self.n_channels {
            Some(idx as usize)
        } else {
            None
        }
    }
}

/// Named, column-normalised signature matrix on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureLibrary {
    grid: ChannelGrid,
    names: Vec<String>,
    matrix: Array2<f64>,
}

impl SignatureLibrary {
    /// Build a library from raw columns, validating shape, signs, and names.
    /// Columns whose sums deviate from 1 by more than [`COLUMN_SUM_TOL`] are
    /// renormalised (with a log notice); columns already within tolerance are
    /// left untouched.
    pub fn from_columns(
        grid: ChannelGrid,
        names: Vec<String>,
        mut matrix: Array2<f64>,
    ) -> Result<Self> {
        let (m, n) = matrix.dim();
        if m != grid.n_channels {
            return Err(Error::Dimension {
                context: "signature matrix rows".into(),
                expected: grid.n_channels,
                got: m,
            });
        }
        if n == 0 {
            return Err(Error::invalid("signature matrix", "no columns"));
        }
        if names.len() != n {
            return Err(Error::Dimension {
                context: "signature names".into(),
                expected: n,
                got: names.len(),
            });
        }
        for (j, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::invalid(
                    "signature name",
                    format!("column {j} unnamed"),
                ));
            }
            if names[..j].contains(name) {
                return Err(Error::DuplicateName { name: name.clone() });
            }
        }
        for ((row, col), &v) in matrix.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NegativeEntry { row, col, value: v });
            }
        }
        for (j, name) in names.iter().enumerate() {
            let sum: f64 = matrix.column(j).sum();
            if sum <= 0.0 {
                return Err(Error::ZeroColumn {
                    col: j,
                    name: name.clone(),
                });
            }
            if (sum - 1.0).abs() > COLUMN_SUM_TOL {
                log::info!("renormalising signature column {j} ({name}): sum was {sum:.6e}");
                matrix.column_mut(j).mapv_inplace(|v| v / sum);
            }
        }
        Ok(SignatureLibrary {
            grid,
            names,
            matrix,
        })
    }

    pub fn grid(&self) -> ChannelGrid {
        self.grid
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_channels(&self) -> usize {
        self.grid.n_channels
    }

    pub fn n_signatures(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.matrix.column(j)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Expected spectrum `X a` for per-signature total counts `a`.
    pub fn expected_counts(&self, a: &[f64]) -> Result<Array1<f64>> {
        if a.len() != self.n_signatures() {
            return Err(Error::Dimension {
                context: "activity vector".into(),
                expected: self.n_signatures(),
                got: a.len(),
            });
        }
        let a = Array1::from_vec(a.to_vec());
        Ok(self.matrix.dot(&a))
    }

    /// Save to `path`; the format follows the extension (`.csv` with a grid
    /// sidecar, or `.json` self-contained).
    pub fn save(&self, path: &Path) -> Result<()> {
        match extension(path) {
            Ext::Csv => self.save_csv(path),
            Ext::Json => self.save_json(path),
        }
    }

    fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&self.names.join(","));
        out.push('\n');
        for row in self.matrix.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())?;
        let sidecar = grid_sidecar_path(path);
        let grid_json = serde_json::to_string_pretty(&self.grid)
            .map_err(|e| Error::invalid("grid sidecar", e.to_string()))?;
        write_atomic(&sidecar, grid_json.as_bytes())
    }

    fn save_json(&self, path: &Path) -> Result<()> {
        let doc = LibraryDoc {
            grid: self.grid,
            names: self.names.clone(),
            columns: (0..self.n_signatures())
                .map(|j| self.matrix.column(j).to_vec())
                .collect(),
        };
        let body = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::invalid("library json", e.to_string()))?;
        write_atomic(path, body.as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct LibraryDoc {
    grid: ChannelGrid,
    names: Vec<String>,
    /// Column-major: `columns[j]` is signature `j`, length `n_channels`.
    columns: Vec<Vec<f64>>,
}

enum Ext {
    Csv,
    Json,
}

fn extension(path: &Path) -> Ext {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ext::Json,
        _ => Ext::Csv,
    }
}

/// Sidecar holding the grid for a CSV library: `foo.csv` -> `foo.grid.json`.
pub fn grid_sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("grid.json")
}

/// Load a signature library; the format follows the extension (`.csv` with a
/// `.grid.json` sidecar, or a self-contained `.json`).
pub fn load_library(path: &Path) -> Result<SignatureLibrary> {
    match extension(path) {
        Ext::Csv => load_csv(path),
        Ext::Json => load_json(path),
    }
}

fn load_csv(path: &Path) -> Result<SignatureLibrary> {
    let sidecar = grid_sidecar_path(path);
    let grid_text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let grid: ChannelGrid = serde_json::from_str(&grid_text).map_err(|e| Error::Parse {
        path: sidecar.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let grid = ChannelGrid::new(grid.n_channels, grid.bin_width_kev, grid.e_min_kev)?;
    load_csv_with_grid(path, grid)
}

/// Parse a headered signature CSV whose grid is known from elsewhere (e.g. a
/// collection manifest).
pub(crate) fn load_csv_with_grid(path: &Path, grid: ChannelGrid) -> Result<SignatureLibrary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut values = Vec::with_capacity(grid.n_channels * n);
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("expected {n} fields, got {}", fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("bad number {f:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != grid.n_channels {
        return Err(Error::Dimension {
            context: format!("{} data rows", path.display()),
            expected: grid.n_channels,
            got: rows,
        });
    }
    let matrix = Array2::from_shape_vec((rows, n), values)
        .map_err(|e| Error::invalid("signature matrix", e.to_string()))?;
    SignatureLibrary::from_columns(grid, names, matrix)
}

fn load_json(path: &Path) -> Result<SignatureLibrary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: LibraryDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let grid = ChannelGrid::new(
        doc.grid.n_channels,
        doc.grid.bin_width_kev,
        doc.grid.e_min_kev,
    )?;
    let n = doc.names.len();
    if doc.columns.len() != n {
        return Err(Error::Dimension {
            context: "json columns".into(),
            expected: n,
            got: doc.columns.len(),
        });
    }
    let mut matrix = Array2::zeros((grid.n_channels, n));
    for (j, col) in doc.columns.iter().enumerate() {
        if col.len() != grid.n_channels {
            return Err(Error::Dimension {
                context: format!("json column {j}"),
                expected: grid.n_channels,
                got: col.len(),
            });
        }
        for (i, &v) in col.iter().enumerate() {
            matrix[(i, j)] = v;
        }
    }
    SignatureLibrary::from_columns(grid, doc.names, matrix)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Synthesise a signature column from a photopeak table.
///
/// Each `(energy_kev, intensity)` peak becomes a Gaussian whose FWHM scales
/// as `resolution_at_662 * 662 * sqrt(E / 662)`, integrated exactly over each
/// channel. A flat shelf from the grid floor up to the highest peak energy
/// models scattering; `continuum_level` is its share of the total area.
pub fn synth_signature(
    grid: ChannelGrid,
    peaks: &[(f64, f64)],
    resolution_at_662: f64,
    continuum_level: f64,
) -> Result<Array1<f64>> {
    if peaks.is_empty() {
        return Err(Error::invalid("peaks", "need at least one photopeak"));
    }
    if !(resolution_at_662 > 0.0 && resolution_at_662 < 1.0) {
        return Err(Error::OutOfRange {
            what: "resolution_at_662".into(),
            value: resolution_at_662,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if !(0.0..1.0).contains(&continuum_level) {
        return Err(Error::OutOfRange {
            what: "continuum_level".into(),
            value: continuum_level,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let mut top_energy = f64::NEG_INFINITY;
    for &(e, i) in peaks {
        if grid.channel_of(e).is_none() {
            return Err(Error::OutOfRange {
                what: "peak energy".into(),
                value: e,
                lo: grid.e_min_kev,
                hi: grid.e_max_kev(),
            });
        }
        if !(i.is_finite() && i > 0.0) {
            return Err(Error::invalid("peak intensity", format!("{i} at {e} keV")));
        }
        top_energy = top_energy.max(e);
    }

    let m = grid.n_channels;
    let mut peak_part = vec![0.0f64; m];
    for &(e, intensity) in peaks {
        let fwhm = resolution_at_662 * 662.0 * (e / 662.0).sqrt();
        let sigma = fwhm / FWHM_TO_SIGMA;
        let denom = sigma * std::f64::consts::SQRT_2;
        for (i, slot) in peak_part.iter_mut().enumerate() {
            let lo = grid.lower_edge(i);
            let hi = grid.upper_edge(i);
            let mass = 0.5 * (erf((hi - e) / denom) - erf((lo - e) / denom));
            *slot += intensity * mass;
        }
    }
    let peak_total: f64 = peak_part.iter().sum();
    if peak_total <= 0.0 {
        return Err(Error::invalid("peaks", "no in-range peak mass"));
    }

    let mut col = Array1::zeros(m);
    let shelf_span = top_energy - grid.e_min_kev;
    for i in 0..m {
        let peak_frac = peak_part[i] / peak_total;
        let shelf = if shelf_span > 0.0 && continuum_level > 0.0 {
            let overlap = (top_energy.min(grid.upper_edge(i)) - grid.lower_edge(i))
                .clamp(0.0, grid.bin_width_kev);
            overlap / shelf_span
        } else {
            0.0
        };
        col[i] = (1.0 - continuum_level) * peak_frac + continuum_level * shelf;
    }
    let total = col.sum();
    col.mapv_inplace(|v| v / total);
    Ok(col)
}
