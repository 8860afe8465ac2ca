//! Built-in stand-in signature models for a nine-radionuclide NaI(Tl) setup.
//!
//! These are parametric surrogates, not measured detector responses: each
//! radionuclide is rendered from its dominant photopeaks with the detector's
//! sqrt-energy resolution law plus a flat scattering shelf, and the ambient
//! background is a smooth decaying continuum. They reproduce the structure
//! the benchmark needs (overlapping peaks, shared continua, a low-energy
//! emitter, a multi-line emitter) without shipping measurement data.

use crate::error::Result;
use crate::signature::{synth_signature, ChannelGrid, SignatureLibrary};
use crate::variability::{ShiftModel, SignatureManifold};
use ndarray::{Array1, Array2};

pub const BACKGROUND_NAME: &str = "Bkg";

/// Fractional FWHM at the 662 keV reference line.
pub const DEFAULT_RESOLUTION: f64 = 0.065;

/// Area fraction of the flat scattering shelf in an unshielded signature.
const BASE_CONTINUUM: f64 = 0.30;

/// The nine radionuclides, in library order (background excluded).
pub const RADIONUCLIDES: [&str; 9] = [
    "Co-57", "Co-60", "Tc-99m", "I-123", "I-131", "Ba-133", "Cs-137", "Eu-152", "Am-241",
];

/// Dominant photopeaks as `(energy_keV, branching_weight)`.
fn peak_table(name: &str) -> &'static [(f64, f64)] {
    match name {
        "Co-57" => &[(122.1, 0.856), (136.5, 0.107)],
        "Co-60" => &[(1173.2, 0.999), (1332.5, 1.000)],
        "Tc-99m" => &[(140.5, 0.885)],
        "I-123" => &[(159.0, 0.833)],
        "I-131" => &[(364.5, 0.815), (637.0, 0.072)],
        "Ba-133" => &[
            (81.0, 0.329),
            (276.4, 0.072),
            (302.9, 0.183),
            (356.0, 0.621),
            (383.8, 0.089),
        ],
        "Cs-137" => &[(661.7, 0.851)],
        "Eu-152" => &[
            (121.8, 0.284),
            (244.7, 0.076),
            (344.3, 0.265),
            (778.9, 0.129),
            (964.1, 0.146),
            (1085.9, 0.102),
            (1112.1, 0.136),
            (1408.0, 0.210),
        ],
        "Am-241" => &[(59.5, 0.359)],
        other => panic!("unknown radionuclide {other:?}"),
    }
}

/// Ambient background: exponentially decaying continuum, normalised.
pub fn background_column(grid: ChannelGrid) -> Array1<f64> {
    let mut col = Array1::zeros(grid.n_channels);
    for i in 0..grid.n_channels {
        col[i] = (-grid.center(i) / 150.0).exp();
    }
    let total = col.sum();
    col.mapv_inplace(|v| v / total);
    col
}

/// Mass attenuation surrogate for steel shielding, per millimetre.
fn attenuation_per_mm(energy_kev: f64) -> f64 {
    0.057 * (energy_kev / 662.0).powf(-0.85)
}

fn assemble(grid: ChannelGrid, names: &[&str], thickness_mm: f64) -> Result<SignatureLibrary> {
    let n = names.len() + 1;
    let mut matrix = Array2::zeros((grid.n_channels, n));
    matrix.column_mut(0).assign(&background_column(grid));
    // Shielding attenuates photopeaks preferentially at low energy and grows
    // the scattered continuum share.
    let continuum = 1.0 - (1.0 - BASE_CONTINUUM) * (-0.03 * thickness_mm).exp();
    for (j, name) in names.iter().enumerate() {
        let peaks: Vec<(f64, f64)> = peak_table(name)
            .iter()
            .map(|&(e, w)| (e, w * (-attenuation_per_mm(e) * thickness_mm).exp()))
            .collect();
        let col = synth_signature(grid, &peaks, DEFAULT_RESOLUTION, continuum)?;
        matrix.column_mut(j + 1).assign(&col);
    }
    let mut all_names = vec![BACKGROUND_NAME.to_string()];
    all_names.extend(names.iter().map(|s| s.to_string()));
    SignatureLibrary::from_columns(grid, all_names, matrix)
}

/// Unshielded library: background plus all nine radionuclides.
pub fn reference_library(grid: ChannelGrid) -> Result<SignatureLibrary> {
    assemble(grid, &RADIONUCLIDES, 0.0)
}

/// Radionuclides available in the shielded (deformed) setting; I-131 is
/// excluded there.
pub fn deformed_radionuclides() -> Vec<&'static str> {
    RADIONUCLIDES
        .iter()
        .copied()
        .filter(|&n| n != "I-131")
        .collect()
}

/// Library behind `thickness_mm` of steel (background unshielded).
pub fn deformed_library(grid: ChannelGrid, thickness_mm: f64) -> Result<SignatureLibrary> {
    assemble(grid, &deformed_radionuclides(), thickness_mm)
}

pub const DEFAULT_MANIFOLD_KNOTS: usize = 96;
pub const THICKNESS_RANGE_MM: (f64, f64) = (0.001, 30.0);

/// Manifold of shielded libraries at `n_knots` log-spaced thicknesses across
/// [`THICKNESS_RANGE_MM`].
pub fn deformed_manifold(grid: ChannelGrid, n_knots: usize) -> Result<SignatureManifold> {
    let (lo, hi) = THICKNESS_RANGE_MM;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let mut snapshots = Vec::with_capacity(n_knots);
    let mut values = Vec::with_capacity(n_knots);
    for p in 0..n_knots {
        let f = p as f64 / (n_knots - 1) as f64;
        let t = (ln_lo + f * (ln_hi - ln_lo)).exp();
        snapshots.push(deformed_library(grid, t)?);
        values.push(t);
    }
    SignatureManifold::new(snapshots, values)
}

/// Gain-shift model over the unshielded reference library with the default
/// +/-10% alpha range.
pub fn shift_model(grid: ChannelGrid) -> Result<ShiftModel> {
    ShiftModel::with_defaults(reference_library(grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_library_has_background_first_and_nine_nuclides() {
        let lib = reference_library(ChannelGrid::default()).unwrap();
        assert_eq!(lib.n_signatures(), 10);
        assert_eq!(lib.names()[0], BACKGROUND_NAME);
        assert_eq!(&lib.names()[1..], &RADIONUCLIDES);
        for j in 0..lib.n_signatures() {
            assert_abs_diff_eq!(lib.column(j).sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn caesium_peak_sits_in_its_channel() {
        let lib = reference_library(ChannelGrid::default()).unwrap();
        let j = lib.index_of("Cs-137").unwrap();
        let col = lib.column(j);
        let mode = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(mode, 320); // floor((661.7 - 20) / 2)
    }

    #[test]
    fn shielding_attenuates_low_energy_lines_harder() {
        let grid = ChannelGrid::default();
        let thin = deformed_library(grid, 0.001).unwrap();
        let thick = deformed_library(grid, 30.0).unwrap();
        assert_eq!(thin.names(), thick.names());
        assert_eq!(thin.n_signatures(), 9); // background + 8 (no I-131)
        assert!(thin.index_of("I-131").is_none());

        // Am-241's 59.5 keV line loses relative prominence behind 30 mm.
        let j = thin.index_of("Am-241").unwrap();
        let ch = grid.channel_of(59.5).unwrap();
        assert!(thick.matrix()[(ch, j)] < thin.matrix()[(ch, j)]);
    }

    #[test]
    fn deformed_manifold_spans_thickness_range() {
        let man = deformed_manifold(ChannelGrid::default(), 8).unwrap();
        assert_eq!(man.n_snapshots(), 8);
        assert_abs_diff_eq!(man.param_values()[0], 0.001, epsilon = 1e-12);
        assert_abs_diff_eq!(man.param_values()[7], 30.0, epsilon = 1e-9);
    }

    #[test]
    fn shift_model_builds_on_reference() {
        let model = shift_model(ChannelGrid::default()).unwrap();
        assert_eq!(model.alpha_range(), (-0.10, 0.10));
        assert_eq!(model.amplification(), 1_000_000);
        assert_eq!(model.names().len(), 10);
    }
}
