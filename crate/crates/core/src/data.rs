//! Spectra datasets: the in-memory representation, a synthetic generator of
//! pattern-sparse GC-MS-like samples, seeded splits and the on-disk format.
//!
//! A dataset directory holds `manifest.json` plus one binary file per sample:
//!
//! ```text
//! "GCMS"  u32 version  u32 T  u32 F  then T·F little-endian f64, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor3;

/// Entries with magnitude below this count as zero.
pub const ZERO_THRESHOLD: f64 = 1e-15;
pub const SAMPLE_MAGIC: &[u8; 4] = b"GCMS";
pub const SAMPLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 16;

/// Fraction of entries that are (numerically) zero.
pub fn sparsity_ratio(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("sparsity of an empty array is undefined"));
    }
    let zeros = values.iter().filter(|v| v.abs() < ZERO_THRESHOLD).count();
    Ok(zeros as f64 / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSample {
    pub id: String,
    /// retention time × m/z
    pub intensities: Matrix,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t_dim: usize,
    pub f_dim: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SpectrumSample>,
}

impl Dataset {
    pub fn new(
        t_dim: usize,
        f_dim: usize,
        class_names: Vec<String>,
        samples: Vec<SpectrumSample>,
    ) -> Result<Self> {
        for s in &samples {
            validate_sample(s, t_dim, f_dim, class_names.len()).map_err(Error::InvalidArgument)?;
        }
        Ok(Dataset {
            t_dim,
            f_dim,
            class_names,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sparsity(&self) -> Result<f64> {
        let total = self.len() * self.t_dim * self.f_dim;
        if total == 0 {
            return Err(Error::invalid("sparsity of an empty dataset is undefined"));
        }
        let zeros: usize = self
            .samples
            .iter()
            .map(|s| {
                s.intensities
                    .as_slice()
                    .iter()
                    .filter(|v| v.abs() < ZERO_THRESHOLD)
                    .count()
            })
            .sum();
        Ok(zeros as f64 / total as f64)
    }

    /// `len(indices) × T × F` input batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor3 {
        let mut data = Vec::with_capacity(indices.len() * self.t_dim * self.f_dim);
        for &i in indices {
            data.extend_from_slice(self.samples[i].intensities.as_slice());
        }
        Tensor3::from_vec([indices.len(), self.t_dim, self.f_dim], data).expect("sample shapes are validated")
    }

    pub fn labels(&self, indices: &[usize]) -> Matrix {
        let k = self.n_classes();
        let data = indices
            .iter()
            .flat_map(|&i| self.samples[i].labels.iter().map(|&l| f64::from(l)))
            .collect();
        Matrix::from_vec(indices.len(), k, data).expect("label lengths are validated")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// All data elements (one row per sample and retention time), `len·T × F`.
    pub fn elements(&self) -> Matrix {
        let parts: Vec<&Matrix> = self.samples.iter().map(|s| &s.intensities).collect();
        Matrix::vstack(&parts).expect("equal widths")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            t_dim: self.t_dim,
            f_dim: self.f_dim,
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn validate_sample(s: &SpectrumSample, t: usize, f: usize, k: usize) -> std::result::Result<(), String> {
    if s.intensities.rows() != t || s.intensities.cols() != f {
        return Err(format!(
            "sample {} is {}x{}, expected {t}x{f}",
            s.id,
            s.intensities.rows(),
            s.intensities.cols()
        ));
    }
    if let Some(v) = s.intensities.as_slice().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(format!("sample {} has invalid intensity {v}", s.id));
    }
    if s.labels.len() != k {
        return Err(format!(
            "sample {} has {} labels, expected {k}",
            s.id,
            s.labels.len()
        ));
    }
    if s.labels.iter().any(|&l| l > 1) {
        return Err(format!("sample {} has non-binary labels", s.id));
    }
    Ok(())
}

/// Parameters of the synthetic pattern-sparse spectrum generator.
///
/// Every class owns `peaks_per_class` Gaussian peaks in (retention time, m/z)
/// truncated to a ±3σ box. A sample picks `min_labels..=max_labels` classes,
/// sums their peaks (each shifted in retention time by up to `rt_jitter`
/// bins and scaled by `1 ± amplitude_jitter`), adds half-normal noise and
/// zeroes its smallest entries so that `target_sparsity` of them are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub t_dim: usize,
    pub f_dim: usize,
    pub n_classes: usize,
    pub target_sparsity: f64,
    pub peaks_per_class: usize,
    pub noise_scale: f64,
    pub peak_width_t: f64,
    pub peak_width_f: f64,
    pub rt_jitter: usize,
    pub amplitude_jitter: f64,
    pub min_labels: usize,
    pub max_labels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 96,
            t_dim: 128,
            f_dim: 48,
            n_classes: 12,
            target_sparsity: 0.80,
            peaks_per_class: 4,
            noise_scale: 0.25,
            peak_width_t: 2.0,
            peak_width_f: 0.6,
            rt_jitter: 4,
            amplitude_jitter: 0.5,
            min_labels: 1,
            max_labels: 3,
            seed: 0,
        }
    }
}

/// Allowed gap between the requested and the generated sparsity.
pub const SPARSITY_TOLERANCE: f64 = 0.02;

impl SyntheticSpec {
    fn radius(width: f64) -> usize {
        (3.0 * width).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_samples == 0 || self.t_dim == 0 || self.f_dim == 0 || self.n_classes == 0 {
            return fail("sample count, dimensions and class count must be positive".into());
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return fail(format!(
                "target sparsity must lie in (0, 1), got {}",
                self.target_sparsity
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return fail(format!("noise scale must be ≥ 0, got {}", self.noise_scale));
        }
        if !(self.peak_width_t > 0.0 && self.peak_width_f > 0.0)
            || !self.peak_width_t.is_finite()
            || !self.peak_width_f.is_finite()
        {
            return fail("peak widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) {
            return fail(format!(
                "amplitude jitter must lie in [0, 1), got {}",
                self.amplitude_jitter
            ));
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels || self.min_labels > self.n_classes {
            return fail(format!(
                "label counts {}..={} invalid for {} classes",
                self.min_labels, self.max_labels, self.n_classes
            ));
        }
        let rt = Self::radius(self.peak_width_t) + self.rt_jitter;
        let rf = Self::radius(self.peak_width_f);
        if self.t_dim < 2 * rt + 1 || self.f_dim < 2 * rf + 1 {
            return fail(format!(
                "a {}x{} grid cannot hold peaks of half-width {rt}x{rf}",
                self.t_dim, self.f_dim
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    t: usize,
    f: usize,
    amplitude: f64,
}

/// Generates a seeded synthetic dataset; errors if the generated sparsity
/// misses the target by more than [`SPARSITY_TOLERANCE`].
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (t_dim, f_dim) = (spec.t_dim, spec.f_dim);
    let rt = SyntheticSpec::radius(spec.peak_width_t);
    let rf = SyntheticSpec::radius(spec.peak_width_f);
    let margin_t = rt + spec.rt_jitter;

    let mut rng = seeded(derive_seed(spec.seed, 0));
    let templates: Vec<Vec<Peak>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.peaks_per_class)
                .map(|_| Peak {
                    t: rng.random_range(margin_t..t_dim - margin_t),
                    f: rng.random_range(rf..f_dim - rf),
                    amplitude: rng.random_range(0.5..=1.0),
                })
                .collect()
        })
        .collect();

    let zeros_wanted = (spec.target_sparsity * (t_dim * f_dim) as f64).round() as usize;
    let max_labels = spec.max_labels.min(spec.n_classes);
    let mut classes: Vec<usize> = (0..spec.n_classes).collect();
    let mut samples = Vec::with_capacity(spec.n_samples);
    for s in 0..spec.n_samples {
        let mut rng = seeded(derive_seed(spec.seed, 1 + s as u64));
        let n_labels = rng.random_range(spec.min_labels..=max_labels);
        classes.shuffle(&mut rng);
        let mut labels = vec![0u8; spec.n_classes];
        let mut grid = vec![0.0; t_dim * f_dim];
        let mut chosen: Vec<usize> = classes[..n_labels].to_vec();
        chosen.sort_unstable();
        for &c in &chosen {
            labels[c] = 1;
            for peak in &templates[c] {
                let shift = if spec.rt_jitter > 0 {
                    let j = spec.rt_jitter as i64;
                    rng.random_range(-j..=j)
                } else {
                    0
                };
                let scale = if spec.amplitude_jitter > 0.0 {
                    1.0 + spec.amplitude_jitter * rng.random_range(-1.0..=1.0)
                } else {
                    1.0
                };
                let center_t = (peak.t as i64 + shift) as usize;
                for t in center_t - rt..=center_t + rt {
                    let dt = (t as f64 - center_t as f64) / spec.peak_width_t;
                    for f in peak.f - rf..=peak.f + rf {
                        let df = (f as f64 - peak.f as f64) / spec.peak_width_f;
                        grid[t * f_dim + f] +=
                            peak.amplitude * scale * (-0.5 * (dt * dt + df * df)).exp();
                    }
                }
            }
        }
        if spec.noise_scale > 0.0 {
            for v in grid.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += spec.noise_scale * z.abs();
            }
        }
        // zero the smallest entries; ties broken by position
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]).then(a.cmp(&b)));
        for &i in &order[..zeros_wanted] {
            grid[i] = 0.0;
        }
        samples.push(SpectrumSample {
            id: format!("s{s:05}"),
            intensities: Matrix::from_vec(t_dim, f_dim, grid)?,
            labels,
        });
    }

    let class_names = (0..spec.n_classes).map(|c| format!("class_{c:02}")).collect();
    let dataset = Dataset::new(t_dim, f_dim, class_names, samples)?;
    let achieved = dataset.sparsity()?;
    if (achieved - spec.target_sparsity).abs() > SPARSITY_TOLERANCE {
        return Err(Error::invalid(format!(
            "target sparsity {} is unattainable with these peaks and noise (got {achieved:.4})",
            spec.target_sparsity
        )));
    }
    Ok(dataset)
}

/// Seeded shuffle then partition into `(train, test)`.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(d.len(), test_fraction, seed)?;
    Ok((d.subset(&train), d.subset(&test)))
}

/// Index form of [`train_test_split`].
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} samples")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = order.split_off(n - n_test);
    Ok((order, test))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    t_dim: usize,
    f_dim: usize,
    class_names: Vec<String>,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    file: String,
    labels: Vec<u8>,
}

pub fn encode_sample(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != SAMPLE_MAGIC {
        return Err(schema("missing GCMS header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != SAMPLE_FORMAT_VERSION {
        return Err(schema(format!("unsupported sample format version {version}")));
    }
    let (t, f) = (word(8) as usize, word(12) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * t * f {
        return Err(schema(format!(
            "expected {} bytes of intensities for {t}x{f}, found {}",
            8 * t * f,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(pos) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(schema(format!(
            "intensity {} at ({}, {}) is negative or non-finite",
            values[pos],
            pos / f.max(1),
            pos % f.max(1)
        )));
    }
    Matrix::from_vec(t, f, values)
}

fn sample_file_name(id: &str) -> String {
    format!("samples/{id}.gcms")
}

/// Writes `manifest.json` and `samples/<id>.gcms` under `dir`.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut entries = Vec::with_capacity(d.len());
    for s in &d.samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::invalid(format!("sample id {:?} is not a valid file name", s.id)));
        }
        let file = sample_file_name(&s.id);
        let path = dir.join(&file);
        fs::write(&path, encode_sample(&s.intensities)).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            file,
            labels: s.labels.clone(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        t_dim: d.t_dim,
        f_dim: d.f_dim,
        class_names: d.class_names.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Schema {
            path: manifest_path,
            message: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let intensities = decode_sample(&bytes, &path)?;
        let sample = SpectrumSample {
            id: entry.id,
            intensities,
            labels: entry.labels,
        };
        validate_sample(&sample, manifest.t_dim, manifest.f_dim, manifest.class_names.len())
            .map_err(|message| Error::Schema {
                path: path.clone(),
                message,
            })?;
        samples.push(sample);
    }
    Ok(Dataset {
        t_dim: manifest.t_dim,
        f_dim: manifest.f_dim,
        class_names: manifest.class_names,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_ratio(&[0.0; 9]).unwrap(), 1.0);
        assert_eq!(sparsity_ratio(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 0.8);
        assert!(sparsity_ratio(&[]).is_err());
    }

    #[test]
    fn split_sizes() {
        let (train, test) = split_indices(10, 0.2, 4).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
    }

    #[test]
    fn invalid_sparsity_rejected() {
        let spec = SyntheticSpec {
            target_sparsity: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unattainable_sparsity_rejected() {
        // one tiny noiseless peak cannot fill half of the grid
        let spec = SyntheticSpec {
            n_samples: 2,
            t_dim: 20,
            f_dim: 10,
            n_classes: 1,
            peaks_per_class: 1,
            noise_scale: 0.0,
            rt_jitter: 0,
            target_sparsity: 0.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sample_header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0, 2.5]]).unwrap();
        let bytes = encode_sample(&m);
        assert_eq!(&bytes[..4], b"GCMS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[32..40], &2.5f64.to_le_bytes());
        assert_eq!(decode_sample(&bytes, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn truncated_sample_is_schema_error() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let bytes = encode_sample(&m);
        let err = decode_sample(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }
}
