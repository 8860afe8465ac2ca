//! Synthetic labelled-spectrum generation.
//!
//! Each spectrum mixes the background with 0..=4 radionuclides: total counts
//! are log-uniform, mixing weights flat-Dirichlet with a background floor,
//! per-signature counts integerised, low-count sources re-drawn (and, past a
//! retry budget, dropped), and channel counts Poisson-sampled from the mixed
//! expectation. Every spectrum derives its own counter-based RNG stream from
//! `(seed, index)`, so generation is bit-identical at any parallelism level.

use crate::error::{Error, Result};
use crate::hash::sha256_file;
use crate::signature::{load_library, ChannelGrid};
use crate::variability::{ShiftModel, SignatureManifold, SignatureSource, Variability};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

/// Which signature regime generated a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Fixed, perfectly known library.
    Known,
    /// Signatures deform along a tabulated manifold (e.g. shielding).
    Deformed,
    /// Signatures suffer a multiplicative energy-gain shift.
    Shifted,
}

impl Scenario {
    pub fn variability(self) -> Variability {
        match self {
            Scenario::Known => Variability::None,
            Scenario::Deformed => Variability::Manifold,
            Scenario::Shifted => Variability::Shift,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Known => "known",
            Scenario::Deformed => "deformed",
            Scenario::Shifted => "shifted",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(Scenario::Known),
            "deformed" => Ok(Scenario::Deformed),
            "shifted" => Ok(Scenario::Shifted),
            other => Err(Error::invalid(
                "scenario",
                format!("{other:?} (expected known, deformed, or shifted)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(
                "split",
                format!("{other:?} (expected train, val, or test)"),
            )),
        }
    }
}

/// Generation recipe for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_spectra: usize,
    pub seed: u64,
    /// Log-uniform range of expected total counts.
    pub total_counts_range: (f64, f64),
    /// Number of radionuclides per spectrum is uniform on 0..=max_active.
    pub max_active: usize,
    /// Minimum background mixing weight.
    pub bkg_min_weight: f64,
    /// Per-radionuclide minimum integer counts; others use the default.
    pub min_counts: BTreeMap<String, u64>,
    pub default_min_counts: u64,
    /// Weight re-draws allowed before the worst under-minimum radionuclide is
    /// dropped from the spectrum.
    pub max_weight_redraws: usize,
    /// Train/validation/test fractions (assigned contiguously by index).
    pub split_fractions: (f64, f64, f64),
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n_spectra: usize, seed: u64) -> Self {
        let mut min_counts = BTreeMap::new();
        // High-energy emitters need more counts to register above background.
        for name in ["Co-60", "Cs-137", "Eu-152"] {
            min_counts.insert(name.to_string(), 100);
        }
        ScenarioConfig {
            scenario,
            n_spectra,
            seed,
            total_counts_range: (200.0, 100_000.0),
            max_active: 4,
            bkg_min_weight: 0.10,
            min_counts,
            default_min_counts: 50,
            max_weight_redraws: 1000,
            split_fractions: (0.64, 0.16, 0.20),
        }
    }

    pub fn validate(&self, source: &SignatureSource) -> Result<()> {
        if self.n_spectra == 0 {
            return Err(Error::invalid("config", "n_spectra must be positive"));
        }
        let (lo, hi) = self.total_counts_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::invalid(
                "config",
                format!("total_counts_range ({lo}, {hi})"),
            ));
        }
        if !(0.0..1.0).contains(&self.bkg_min_weight) {
            return Err(Error::OutOfRange {
                what: "bkg_min_weight".into(),
                value: self.bkg_min_weight,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let n_radio = source.n_signatures().saturating_sub(1);
        if self.max_active > n_radio {
            return Err(Error::invalid(
                "config",
                format!(
                    "max_active {} exceeds {n_radio} radionuclides",
                    self.max_active
                ),
            ));
        }
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("config", "split fractions must sum to 1"));
        }
        if self.scenario.variability() != source.variability() {
            return Err(Error::invalid(
                "config",
                format!(
                    "scenario {} needs a matching source, got {}",
                    self.scenario,
                    source.variability()
                ),
            ));
        }
        Ok(())
    }

    fn min_counts_for(&self, name: &str) -> u64 {
        self.min_counts
            .get(name)
            .copied()
            .unwrap_or(self.default_min_counts)
    }
}

/// Ground truth and observation for one simulated spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSpectrum {
    pub index: usize,
    pub split: Split,
    /// Observed channel counts.
    pub y: Vec<u32>,
    /// Presence per radionuclide (background excluded).
    pub labels: Vec<bool>,
    /// True integer counts per signature (background first).
    pub counts: Vec<u64>,
    /// True mixing weights, recomputed from the integer counts.
    pub weights: Vec<f64>,
    /// Physical variability parameter (thickness or alpha), if any.
    pub param: Option<f64>,
}

/// Sampled composition, before Poisson noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub labels: Vec<bool>,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub param: Option<f64>,
}

/// The RNG stream for spectrum `index` of a dataset: one ChaCha stream per
/// spectrum, so any subset can be generated independently and in parallel
/// without changing a single draw.
pub fn spectrum_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn deterministic_split(index: usize, n: usize, fractions: (f64, f64, f64)) -> Split {
    let n_train = (n as f64 * fractions.0).floor() as usize;
    let n_val = (n as f64 * fractions.1).floor() as usize;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Sizes of the contiguous train/val/test blocks for `n` spectra.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_train = (n as f64 * fractions.0).floor() as usize;
    let n_val = (n as f64 * fractions.1).floor() as usize;
    (n_train, n_val, n - n_train - n_val)
}

/// Draw one composition: total counts, active radionuclides, a variability
/// parameter where the scenario has one, and integer per-signature counts
/// honouring the background floor and per-radionuclide minima.
pub fn sample_mixture<R: Rng>(
    config: &ScenarioConfig,
    source: &SignatureSource,
    rng: &mut R,
) -> Result<Mixture> {
    config.validate(source)?;
    let names = source.names();
    let n = names.len();
    let n_radio = n - 1;

    let (lo, hi) = config.total_counts_range;
    let total = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();

    let k = rng.random_range(0..=config.max_active);
    let mut active: Vec<usize> = rand::seq::index::sample(rng, n_radio, k)
        .into_iter()
        .map(|j| j + 1)
        .collect();
    active.sort_unstable();

    let param = match source {
        SignatureSource::Fixed(_) => None,
        SignatureSource::Manifold(man) => {
            let values = man.param_values();
            let (tlo, thi) = (values[0], values[values.len() - 1]);
            let t = (tlo.ln() + rng.random::<f64>() * (thi.ln() - tlo.ln())).exp();
            Some(t.clamp(tlo, thi))
        }
        SignatureSource::Shift(model) => {
            let (alo, ahi) = model.alpha_range();
            Some(alo + rng.random::<f64>() * (ahi - alo))
        }
    };

    let floor = config.bkg_min_weight;
    let mut counts;
    let mut redraws = 0usize;
    loop {
        // Flat Dirichlet over background + active sources.
        let mut gammas: Vec<f64> = (0..active.len() + 1).map(|_| rng.sample(Exp1)).collect();
        let gsum: f64 = gammas.iter().sum();
        gammas.iter_mut().for_each(|g| *g /= gsum);
        if gammas[0] < floor && !active.is_empty() {
            let rescale = (1.0 - floor) / (1.0 - gammas[0]);
            for g in gammas.iter_mut().skip(1) {
                *g *= rescale;
            }
            gammas[0] = floor;
        }
        if active.is_empty() {
            gammas[0] = 1.0;
        }

        counts = vec![0u64; n];
        counts[0] = (gammas[0] * total).round() as u64;
        for (slot, &j) in active.iter().enumerate() {
            counts[j] = (gammas[slot + 1] * total).round() as u64;
        }

        // Find the active source farthest below its minimum, if any.
        let mut worst: Option<(u64, usize)> = None; // (deficit, index into active)
        for (slot, &j) in active.iter().enumerate() {
            let need = config.min_counts_for(&names[j]);
            if counts[j] < need {
                let deficit = need - counts[j];
                if worst.is_none_or(|(d, _)| deficit > d) {
                    worst = Some((deficit, slot));
                }
            }
        }
        match worst {
            None => break,
            Some((_, slot)) => {
                redraws += 1;
                if redraws >= config.max_weight_redraws {
                    // This composition cannot support that many sources at
                    // these total counts; drop the worst offender and retry.
                    active.remove(slot);
                    redraws = 0;
                }
            }
        }
    }

    // Integer rounding may have nudged the background share below its floor;
    // repair by raising the background counts to the smallest integer
    // restoring `counts[0] / sum >= floor`.
    let rest: u64 = counts[1..].iter().sum();
    if rest > 0 && floor > 0.0 {
        let needed = (rest as f64 * floor / (1.0 - floor)).ceil() as u64;
        counts[0] = counts[0].max(needed);
    }

    let sum: u64 = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / sum as f64).collect();
    let mut labels = vec![false; n_radio];
    for &j in &active {
        labels[j - 1] = true;
    }
    Ok(Mixture {
        labels,
        counts,
        weights,
        param,
    })
}

/// Poisson-sample channel counts for a composition: the expectation is the
/// signature mix realised at the spectrum's variability parameter.
pub fn sample_spectrum<R: Rng>(
    source: &SignatureSource,
    counts: &[u64],
    param: Option<f64>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let n = source.n_signatures();
    if counts.len() != n {
        return Err(Error::Dimension {
            context: "mixture counts".into(),
            expected: n,
            got: counts.len(),
        });
    }
    let latent = match (source, param) {
        (SignatureSource::Fixed(_), None) => None,
        (SignatureSource::Manifold(man), Some(t)) => Some(man.lambda_for_param(t)?),
        (SignatureSource::Shift(_), Some(alpha)) => Some(alpha),
        _ => {
            return Err(Error::invalid(
                "parameter",
                "mixture parameter does not match the signature source",
            ))
        }
    };
    let lib = source.realize(latent)?;
    let m = lib.n_channels();
    let mut mu = vec![0.0f64; m];
    for (j, &aj) in counts.iter().enumerate() {
        if aj == 0 {
            continue;
        }
        let col = lib.column(j);
        let a = aj as f64;
        for (slot, &x) in mu.iter_mut().zip(col.iter()) {
            *slot += a * x;
        }
    }
    let mut y = Vec::with_capacity(m);
    for &mean in &mu {
        if mean > 0.0 {
            let dist = Poisson::new(mean)
                .map_err(|e| Error::invalid("poisson mean", format!("{mean}: {e}")))?;
            y.push(dist.sample(rng) as u32);
        } else {
            y.push(0);
        }
    }
    Ok(y)
}

/// Generate spectrum `index` of the dataset described by `config`.
pub fn generate_spectrum(
    config: &ScenarioConfig,
    source: &SignatureSource,
    index: usize,
) -> Result<LabeledSpectrum> {
    let mut rng = spectrum_rng(config.seed, index);
    let mixture = sample_mixture(config, source, &mut rng)?;
    let y = sample_spectrum(source, &mixture.counts, mixture.param, &mut rng)?;
    Ok(LabeledSpectrum {
        index,
        split: deterministic_split(index, config.n_spectra, config.split_fractions),
        y,
        labels: mixture.labels,
        counts: mixture.counts,
        weights: mixture.weights,
        param: mixture.param,
    })
}

/// Ground-truth record as serialised to `truth.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthRecord {
    pub index: usize,
    pub split: Split,
    pub labels: Vec<bool>,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub param: Option<f64>,
}

/// Dataset directory manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scenario: Scenario,
    pub names: Vec<String>,
    pub grid: ChannelGrid,
    pub config: ScenarioConfig,
    /// Present for shifted datasets: the gain model parameters.
    pub shift: Option<ShiftSettings>,
    pub files: DatasetFiles,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSettings {
    pub alpha_range: (f64, f64),
    pub amplification: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub spectra: String,
    pub truth: String,
    pub signatures: Option<String>,
    pub manifold: Option<String>,
}

const SPECTRA_FILE: &str = "spectra.csv";
const TRUTH_FILE: &str = "truth.jsonl";
const SIGNATURES_FILE: &str = "signatures.csv";
const MANIFOLD_DIR: &str = "manifold";
const MANIFEST_FILE: &str = "manifest.json";
const GENERATE_CHUNK: usize = 2048;

/// Generate a full dataset into `out_dir`: `spectra.csv`, `truth.jsonl`, the
/// signature definition, and `manifest.json`. Spectra are computed in
/// parallel chunks but written in index order; output bytes are independent
/// of thread count.
pub fn generate_dataset(
    config: &ScenarioConfig,
    source: &SignatureSource,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate(source)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let spectra_path = out_dir.join(SPECTRA_FILE);
    let truth_path = out_dir.join(TRUTH_FILE);
    let spectra_file = fs::File::create(&spectra_path).map_err(|e| Error::io(&spectra_path, e))?;
    let truth_file = fs::File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
    let mut spectra_out = BufWriter::new(spectra_file);
    let mut truth_out = BufWriter::new(truth_file);

    let m = source.grid().n_channels;
    let mut header = String::from("index");
    for c in 0..m {
        header.push_str(&format!(",c{c}"));
    }
    header.push('\n');
    spectra_out
        .write_all(header.as_bytes())
        .map_err(|e| Error::io(&spectra_path, e))?;

    let mut start = 0usize;
    while start < config.n_spectra {
        let end = (start + GENERATE_CHUNK).min(config.n_spectra);
        let chunk: Result<Vec<LabeledSpectrum>> = (start..end)
            .into_par_iter()
            .map(|i| generate_spectrum(config, source, i))
            .collect();
        for spec in chunk? {
            let mut line = String::with_capacity(m * 4 + 8);
            line.push_str(&spec.index.to_string());
            for &c in &spec.y {
                line.push(',');
                line.push_str(&c.to_string());
            }
            line.push('\n');
            spectra_out
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(&spectra_path, e))?;

            let record = TruthRecord {
                index: spec.index,
                split: spec.split,
                labels: spec.labels,
                counts: spec.counts,
                weights: spec.weights,
                param: spec.param,
            };
            let json = serde_json::to_string(&record)
                .map_err(|e| Error::invalid("truth record", e.to_string()))?;
            truth_out
                .write_all(json.as_bytes())
                .and_then(|_| truth_out.write_all(b"\n"))
                .map_err(|e| Error::io(&truth_path, e))?;
        }
        start = end;
    }
    spectra_out
        .flush()
        .map_err(|e| Error::io(&spectra_path, e))?;
    truth_out.flush().map_err(|e| Error::io(&truth_path, e))?;

    let mut files = DatasetFiles {
        spectra: SPECTRA_FILE.into(),
        truth: TRUTH_FILE.into(),
        signatures: None,
        manifold: None,
    };
    let mut shift = None;
    match source {
        SignatureSource::Fixed(lib) => {
            lib.save(&out_dir.join(SIGNATURES_FILE))?;
            files.signatures = Some(SIGNATURES_FILE.into());
        }
        SignatureSource::Manifold(man) => {
            man.save_dir(&out_dir.join(MANIFOLD_DIR))?;
            files.manifold = Some(MANIFOLD_DIR.into());
        }
        SignatureSource::Shift(model) => {
            model.reference().save(&out_dir.join(SIGNATURES_FILE))?;
            files.signatures = Some(SIGNATURES_FILE.into());
            shift = Some(ShiftSettings {
                alpha_range: model.alpha_range(),
                amplification: model.amplification(),
            });
        }
    }

    let mut checksums = BTreeMap::new();
    checksums.insert(SPECTRA_FILE.into(), sha256_file(&spectra_path)?);
    checksums.insert(TRUTH_FILE.into(), sha256_file(&truth_path)?);

    let manifest = DatasetManifest {
        format_version: 1,
        scenario: config.scenario,
        names: source.names().to_vec(),
        grid: source.grid(),
        config: config.clone(),
        shift,
        files,
        checksums,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid("dataset manifest", e.to_string()))?;
    fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub spectra: Vec<Vec<u32>>,
    pub truth: Vec<TruthRecord>,
    pub source: SignatureSource,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;

        let source = match manifest.scenario {
            Scenario::Known => {
                let rel = manifest
                    .files
                    .signatures
                    .as_deref()
                    .unwrap_or(SIGNATURES_FILE);
                SignatureSource::Fixed(load_library(&dir.join(rel))?)
            }
            Scenario::Deformed => {
                let rel = manifest.files.manifold.as_deref().unwrap_or(MANIFOLD_DIR);
                SignatureSource::Manifold(SignatureManifold::load_dir(&dir.join(rel))?)
            }
            Scenario::Shifted => {
                let rel = manifest
                    .files
                    .signatures
                    .as_deref()
                    .unwrap_or(SIGNATURES_FILE);
                let reference = load_library(&dir.join(rel))?;
                let settings = manifest.shift.clone().ok_or_else(|| {
                    Error::invalid("dataset manifest", "shifted dataset lacks shift settings")
                })?;
                SignatureSource::Shift(ShiftModel::new(
                    reference,
                    settings.alpha_range,
                    settings.amplification,
                )?)
            }
        };

        let truth = load_truth(&dir.join(&manifest.files.truth), &manifest)?;
        let spectra = load_spectra(&dir.join(&manifest.files.spectra), &manifest)?;
        if truth.len() != spectra.len() {
            return Err(Error::Dimension {
                context: "dataset truth vs spectra".into(),
                expected: spectra.len(),
                got: truth.len(),
            });
        }
        Ok(Dataset {
            manifest,
            spectra,
            truth,
            source,
        })
    }

    pub fn n_spectra(&self) -> usize {
        self.spectra.len()
    }
}

fn load_truth(path: &Path, manifest: &DatasetManifest) -> Result<Vec<TruthRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let n_sig = manifest.names.len();
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TruthRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if record.index != records.len() {
            return Err(Error::IndexMismatch {
                row: lineno + 1,
                expected: records.len(),
                got: record.index,
            });
        }
        if record.counts.len() != n_sig || record.labels.len() != n_sig - 1 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: "label/count lengths do not match the signature list".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn load_spectra(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = manifest.grid.n_channels;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let mut fields = line.split(',');
        let idx: usize =
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    msg: "missing index".into(),
                })?;
        if idx != rows.len() {
            return Err(Error::IndexMismatch {
                row: lineno + 1,
                expected: rows.len(),
                got: idx,
            });
        }
        let mut y = Vec::with_capacity(m);
        for f in fields {
            let v: u32 = f.trim().parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                msg: format!("bad count {f:?}"),
            })?;
            y.push(v);
        }
        if y.len() != m {
            return Err(Error::Dimension {
                context: format!("spectrum row {}", lineno + 1),
                expected: m,
                got: y.len(),
            });
        }
        rows.push(y);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::SignatureLibrary;
    use ndarray::Array2;
    use tempfile::tempdir;

    fn toy_source() -> SignatureSource {
        let grid = ChannelGrid::new(8, 2.0, 20.0).unwrap();
        let cols: Vec<Vec<f64>> = vec![
            vec![0.30, 0.25, 0.15, 0.10, 0.08, 0.06, 0.04, 0.02], // background
            vec![0.02, 0.03, 0.60, 0.15, 0.10, 0.05, 0.03, 0.02],
            vec![0.01, 0.02, 0.05, 0.10, 0.60, 0.12, 0.06, 0.04],
            vec![0.10, 0.10, 0.10, 0.10, 0.10, 0.10, 0.20, 0.20],
        ];
        let mut matrix = Array2::zeros((8, 4));
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                matrix[(i, j)] = v;
            }
        }
        let names = vec!["Bkg".into(), "A".into(), "B".into(), "C".into()];
        SignatureSource::Fixed(SignatureLibrary::from_columns(grid, names, matrix).unwrap())
    }

    fn toy_config(n: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(Scenario::Known, n, 42);
        cfg.max_active = 3;
        cfg
    }

    #[test]
    fn split_sizes_match_fractions() {
        assert_eq!(split_sizes(100, (0.64, 0.16, 0.20)), (64, 16, 20));
        assert_eq!(split_sizes(10, (0.64, 0.16, 0.20)), (6, 1, 3));
        for n in [1usize, 7, 99, 1000] {
            let (a, b, c) = split_sizes(n, (0.64, 0.16, 0.20));
            assert_eq!(a + b + c, n);
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut r1 = spectrum_rng(7, 3);
        let mut r2 = spectrum_rng(7, 3);
        let mut r3 = spectrum_rng(7, 4);
        let a: f64 = r1.random();
        assert_eq!(a, r2.random::<f64>());
        assert_ne!(a, r3.random::<f64>());
    }

    #[test]
    fn mixtures_respect_floors_and_minima() {
        let source = toy_source();
        let cfg = toy_config(1);
        let mut seen_active = 0usize;
        for i in 0..300 {
            let mut rng = spectrum_rng(1, i);
            let mix = sample_mixture(&cfg, &source, &mut rng).unwrap();
            let total: u64 = mix.counts.iter().sum();
            assert!(total > 0);
            // Background floor holds on the recomputed weights.
            assert!(
                mix.weights[0] >= cfg.bkg_min_weight - 1e-12,
                "background weight {} below floor",
                mix.weights[0]
            );
            // Weights are exactly the integer counts renormalised.
            for (w, &c) in mix.weights.iter().zip(&mix.counts) {
                assert_eq!(*w, c as f64 / total as f64);
            }
            let n_active = mix.labels.iter().filter(|&&l| l).count();
            assert!(n_active <= cfg.max_active);
            seen_active += n_active;
            for (j, &present) in mix.labels.iter().enumerate() {
                let c = mix.counts[j + 1];
                if present {
                    assert!(
                        c >= cfg.default_min_counts,
                        "active count {c} below minimum"
                    );
                } else {
                    assert_eq!(c, 0);
                }
            }
        }
        assert!(seen_active > 0);
    }

    #[test]
    fn sampling_is_deterministic_per_index() {
        let source = toy_source();
        let cfg = toy_config(10);
        let a = generate_spectrum(&cfg, &source, 5).unwrap();
        let b = generate_spectrum(&cfg, &source, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_spectrum(&cfg, &source, 6).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn spectrum_totals_track_expected_counts() {
        let source = toy_source();
        let counts = vec![50_000u64, 30_000, 0, 20_000];
        let mut rng = spectrum_rng(9, 0);
        let y = sample_spectrum(&source, &counts, None, &mut rng).unwrap();
        let total: u64 = y.iter().map(|&c| c as u64).sum();
        let expected = 100_000.0;
        let dev = (total as f64 - expected).abs();
        assert!(
            dev < 5.0 * expected.sqrt(),
            "total {total} too far from {expected}"
        );
    }

    #[test]
    fn zero_mean_channels_stay_empty() {
        let grid = ChannelGrid::new(4, 2.0, 20.0).unwrap();
        let mut matrix = Array2::zeros((4, 1));
        matrix[(0, 0)] = 1.0;
        let lib = SignatureLibrary::from_columns(grid, vec!["Bkg".into()], matrix).unwrap();
        let source = SignatureSource::Fixed(lib);
        let mut rng = spectrum_rng(1, 0);
        let y = sample_spectrum(&source, &[1000], None, &mut rng).unwrap();
        assert_eq!(&y[1..], &[0, 0, 0]);
        assert!(y[0] > 0);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let source = toy_source();
        let cfg = toy_config(25);
        let dir = tempdir().unwrap();
        let manifest = generate_dataset(&cfg, &source, dir.path()).unwrap();
        assert_eq!(manifest.names.len(), 4);

        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.n_spectra(), 25);
        for (i, rec) in ds.truth.iter().enumerate() {
            assert_eq!(rec.index, i);
            let direct = generate_spectrum(&cfg, &source, i).unwrap();
            assert_eq!(rec.counts, direct.counts);
            assert_eq!(rec.labels, direct.labels);
            assert_eq!(rec.split, direct.split);
            assert_eq!(ds.spectra[i], direct.y);
        }
        // Split blocks are contiguous: 16 train, 4 val, 5 test.
        assert!(ds.truth[..16].iter().all(|r| r.split == Split::Train));
        assert!(ds.truth[16..20].iter().all(|r| r.split == Split::Val));
        assert!(ds.truth[20..].iter().all(|r| r.split == Split::Test));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let source = toy_source();
        let cfg = toy_config(12);
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_dataset(&cfg, &source, d1.path()).unwrap();
        generate_dataset(&cfg, &source, d2.path()).unwrap();
        for file in [SPECTRA_FILE, TRUTH_FILE, MANIFEST_FILE, SIGNATURES_FILE] {
            let b1 = fs::read(d1.path().join(file)).unwrap();
            let b2 = fs::read(d2.path().join(file)).unwrap();
            assert_eq!(b1, b2, "{file} differs between identical runs");
        }
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let source = toy_source();
        let mut cfg = toy_config(5);
        cfg.max_active = 9;
        assert!(cfg.validate(&source).is_err());

        let mut cfg = toy_config(5);
        cfg.scenario = Scenario::Deformed;
        assert!(cfg.validate(&source).is_err());

        let mut cfg = toy_config(5);
        cfg.split_fractions = (0.5, 0.2, 0.2);
        assert!(cfg.validate(&source).is_err());

        let mut cfg = toy_config(5);
        cfg.total_counts_range = (0.0, 10.0);
        assert!(cfg.validate(&source).is_err());
    }

    #[test]
    fn shifted_mixtures_carry_alpha_in_range() {
        let grid = ChannelGrid::new(8, 2.0, 20.0).unwrap();
        let fixed = match toy_source() {
            SignatureSource::Fixed(lib) => lib,
            _ => unreachable!(),
        };
        let _ = grid;
        let model = ShiftModel::new(fixed, (-0.1, 0.1), 1_000).unwrap();
        let source = SignatureSource::Shift(model);
        let mut cfg = ScenarioConfig::new(Scenario::Shifted, 1, 3);
        cfg.max_active = 3;
        for i in 0..50 {
            let mut rng = spectrum_rng(3, i);
            let mix = sample_mixture(&cfg, &source, &mut rng).unwrap();
            let alpha = mix.param.unwrap();
            assert!((-0.1..=0.1).contains(&alpha));
        }
    }
}
