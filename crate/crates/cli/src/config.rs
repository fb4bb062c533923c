//! Experiment configuration. Every field has a default so a config file only
//! needs to name what it changes; the fully resolved config is echoed into
//! every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use bpl_core::bpl::{Denominator, InitMethod, DEFAULT_CONCENTRATION};
use bpl_core::data::SyntheticSpec;
use bpl_core::linalg::NMF_DEFAULT_ITERATIONS;
use bpl_core::nn::ModelConfig;
use bpl_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontKind {
    Identity,
    UnitVectorization,
    FullyConnected,
    Bpl,
}

impl FrontKind {
    pub fn name(self) -> &'static str {
        match self {
            FrontKind::Identity => "identity",
            FrontKind::UnitVectorization => "unit_vectorization",
            FrontKind::FullyConnected => "fully_connected",
            FrontKind::Bpl => "bpl",
        }
    }

    /// Whether the front changes the element size (and so takes part in size sweeps).
    pub fn is_sized(self) -> bool {
        matches!(self, FrontKind::FullyConnected | FrontKind::Bpl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontConfig {
    pub kind: FrontKind,
    /// Output element size N; defaults to the data's F.
    pub size: Option<usize>,
    pub norm_type: f64,
    pub denominator: Denominator,
}

impl Default for FrontConfig {
    fn default() -> Self {
        FrontConfig {
            kind: FrontKind::Bpl,
            size: None,
            norm_type: 2.0,
            denominator: Denominator::Norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub method: InitMethod,
    pub concentration: f64,
    pub center: Option<Vec<f64>>,
    pub nmf_iterations: usize,
    /// Cap on data elements fed to SVD/NMF; larger pools are subsampled by seed.
    pub max_factorization_rows: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            method: InitMethod::VonMises,
            concentration: DEFAULT_CONCENTRATION,
            center: None,
            nmf_iterations: NMF_DEFAULT_ITERATIONS,
            max_factorization_rows: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub lr_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adam: AdamConfig::default(),
            lr_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Held-out fraction; 0 trains and evaluates on every sample.
    pub test_fraction: f64,
    pub front: FrontConfig,
    pub init: InitConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_interval: u64,
    /// Also write `checkpoint_step<k>.bin` every this many steps.
    pub checkpoint_interval: Option<u64>,
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            test_fraction: 0.25,
            front: FrontConfig::default(),
            init: InitConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            steps: 2000,
            batch_size: 16,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: None,
            threshold: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale benchmark: the default synthetic data with a 16-channel CNN.
    pub fn benchmark() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                channels: 16,
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                lr_min: 0.0,
            },
            ..ExperimentConfig::default()
        }
    }

    /// Checks everything that can be checked without looking at the data.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return fail(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            ));
        }
        if self.front.size == Some(0) {
            return fail("front.size must be positive".into());
        }
        if !(self.front.norm_type.is_finite() && self.front.norm_type >= 1.0) {
            return fail(format!("front.norm_type must be ≥ 1, got {}", self.front.norm_type));
        }
        if !(self.init.concentration.is_finite() && self.init.concentration > 0.0) {
            return fail(format!(
                "init.concentration must be positive, got {}",
                self.init.concentration
            ));
        }
        if self.init.max_factorization_rows == 0 {
            return fail("init.max_factorization_rows must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.optim
            .adam
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.optim.lr_min >= 0.0 && self.optim.lr_min <= self.optim.adam.lr) {
            return fail(format!(
                "optim.lr_min must lie in [0, lr], got {}",
                self.optim.lr_min
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return fail("steps, batch_size and log_interval must be positive".into());
        }
        if self.checkpoint_interval == Some(0) {
            return fail("checkpoint_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }

    /// Checks against the data dimensions: the initializer must be able to
    /// supply N bases.
    pub fn validate_against(&self, f_dim: usize, n_elements: usize) -> Result<(), CliError> {
        let n = self.front.size.unwrap_or(f_dim);
        if self.front.kind == FrontKind::Bpl {
            if self.init.method.needs_data() {
                let available = n_elements.min(self.init.max_factorization_rows).min(f_dim);
                if n > available {
                    return Err(CliError::Capacity {
                        requested: n,
                        available,
                    });
                }
            }
            if self.init.method == InitMethod::VonMises && f_dim < 2 {
                return Err(CliError::Config(
                    "von Mises initialization needs F ≥ 2".into(),
                ));
            }
            if let Some(c) = &self.init.center {
                if c.len() != f_dim {
                    return Err(CliError::Config(format!(
                        "init.center has {} entries, data has F = {f_dim}",
                        c.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!(
            "{} line {}: {e}",
            path.display(),
            e.line()
        ))
    })
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("config types serialize");
    s.push('\n');
    s
}
