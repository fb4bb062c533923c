//! The sub-commands. Each writes its machine-readable output into a directory
//! and logs progress to stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bpl_core::bpl::InitMethod;
use bpl_core::data::{generate_synthetic, save_dataset, Dataset, SyntheticSpec};
use bpl_core::linalg::{nmf_factorize, svd_top_k, Matrix};
use bpl_core::metrics::{export_basis_embedding, MetricsReport};
use bpl_core::nn::FrontLayer;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{to_pretty_json, DataSource, ExperimentConfig, FrontKind};
use crate::error::{io_error, CliError};
use crate::train::{
    evaluate, factorization_data, load_data, prepare, prepare_with, run_training, LogEntry,
    Prepared, TrainState,
};

pub const TRAIN_REPORT_SCHEMA: &str = "bpl.train_report.v1";
pub const EVALUATION_SCHEMA: &str = "bpl.evaluation.v1";
pub const COMPARISON_SCHEMA: &str = "bpl.comparison.v1";

pub const SPEC_FILE: &str = "synthetic_spec.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const COMPARE_CONFIG_FILE: &str = "compare_config.json";
pub const COMPARISON_JSON_FILE: &str = "comparison.json";
pub const COMPARISON_CSV_FILE: &str = "comparison.csv";
pub const EMBEDDING_FILE: &str = "basis_embedding.csv";

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path, force: bool) -> Result<Dataset, CliError> {
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let dataset = generate_synthetic(spec)?;
    prepare_output_dir(out, force)?;
    save_dataset(&dataset, out)?;
    write_file(&out.join(SPEC_FILE), to_pretty_json(spec))?;
    log::info!(
        "wrote {} samples ({}x{}, sparsity {:.4}) to {}",
        dataset.len(),
        dataset.t_dim,
        dataset.f_dim,
        dataset.sparsity()?,
        out.display()
    );
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub schema: String,
    pub config: ExperimentConfig,
    pub steps_completed: u64,
    pub final_loss: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub train: MetricsReport,
    /// Absent when the config holds out no samples.
    pub test: Option<MetricsReport>,
    pub log: Vec<LogEntry>,
}

pub struct TrainOptions<'a> {
    pub out: &'a Path,
    pub force: bool,
    pub resume: Option<&'a Path>,
    /// Overrides the data source of the config (or of the resumed checkpoint).
    pub data: Option<&'a Path>,
    /// Stop (and checkpoint) after this many total steps.
    pub max_steps: Option<u64>,
}

/// Runs (or resumes) a training job. Returns the report once the configured
/// step count is reached, `None` if stopped early by `max_steps`.
pub fn train(
    config: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<(TrainState, Option<TrainReport>), CliError> {
    let (prepared, mut state) = match opts.resume {
        Some(path) => {
            let mut state = checkpoint::load(path)?;
            if let Some(d) = opts.data {
                state.config.data = DataSource::Path(d.to_path_buf());
            }
            let prepared = prepare(&state.config)?;
            if prepared.config != state.config {
                return Err(CliError::Config(
                    "checkpoint config does not resolve to itself".into(),
                ));
            }
            fs::create_dir_all(opts.out).map_err(|e| io_error(opts.out, e))?;
            log::info!("resuming {} at step {}", path.display(), state.step);
            (prepared, state)
        }
        None => {
            let mut config = config.clone();
            if let Some(d) = opts.data {
                config.data = DataSource::Path(d.to_path_buf());
            }
            let prepared = prepare(&config)?;
            prepare_output_dir(opts.out, opts.force)?;
            let state = TrainState::new(&prepared)?;
            (prepared, state)
        }
    };
    write_file(
        &opts.out.join(RESOLVED_CONFIG_FILE),
        to_pretty_json(&prepared.config),
    )?;
    log::info!(
        "training {} front, {} parameters, {} train / {} test samples",
        prepared.config.front.kind.name(),
        state.model.parameter_count(),
        prepared.train.len(),
        prepared.test.len()
    );

    let until = opts.max_steps.unwrap_or(u64::MAX);
    let out = opts.out.to_path_buf();
    run_training(&mut state, &prepared, until, |s| {
        checkpoint::save(s, &out.join(format!("checkpoint_step{}.bin", s.step)))
    })?;
    checkpoint::save(&state, &opts.out.join(CHECKPOINT_FILE))?;

    if state.step < state.config.steps {
        log::info!("stopped at step {} of {}", state.step, state.config.steps);
        return Ok((state, None));
    }
    let report = train_report(&state, &prepared)?;
    write_file(&opts.out.join(TRAIN_REPORT_FILE), to_pretty_json(&report))?;
    log::info!(
        "done: train micro-F1 {:.4}{}",
        report.train.micro_f1,
        report
            .test
            .as_ref()
            .map(|t| format!(", test micro-F1 {:.4}", t.micro_f1))
            .unwrap_or_default()
    );
    Ok((state, Some(report)))
}

pub fn train_report(state: &TrainState, prepared: &Prepared) -> Result<TrainReport, CliError> {
    let threshold = state.config.threshold;
    let mut train_metrics = evaluate(&state.model, &prepared.dataset, &prepared.train, threshold)?;
    train_metrics.loss_history = state.loss_history.clone();
    let test = if prepared.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &prepared.dataset, &prepared.test, threshold)?)
    };
    Ok(TrainReport {
        schema: TRAIN_REPORT_SCHEMA.into(),
        config: state.config.clone(),
        steps_completed: state.step,
        final_loss: state.loss_history.last().copied().unwrap_or(f64::NAN),
        n_train: prepared.train.len(),
        n_test: prepared.test.len(),
        train: train_metrics,
        test,
        log: state.log.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema: String,
    pub split: Split,
    pub n_samples: usize,
    pub step: u64,
    pub metrics: MetricsReport,
}

/// Evaluates a checkpoint. With `data`, the whole directory is scored and
/// `split` is ignored; otherwise the checkpoint's own data and split are used.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    data: Option<&Path>,
    split: Split,
) -> Result<EvaluationReport, CliError> {
    let state = checkpoint::load(checkpoint_path)?;
    let (dataset, indices, split) = match data {
        Some(dir) => {
            let d = load_data(&DataSource::Path(dir.to_path_buf()))?;
            check_dims(&state, &d, dir)?;
            let idx = d.all_indices();
            (d, idx, Split::All)
        }
        None => {
            let p = prepare(&state.config)?;
            let idx = match split {
                Split::Train => p.train.clone(),
                Split::Test => p.test.clone(),
                Split::All => p.dataset.all_indices(),
            };
            if idx.is_empty() {
                return Err(CliError::Data(format!("the {} split is empty", split.name())));
            }
            (p.dataset, idx, split)
        }
    };
    let mut metrics = evaluate(&state.model, &dataset, &indices, state.config.threshold)?;
    metrics.loss_history = state.loss_history.clone();
    Ok(EvaluationReport {
        schema: EVALUATION_SCHEMA.into(),
        split,
        n_samples: indices.len(),
        step: state.step,
        metrics,
    })
}

fn check_dims(state: &TrainState, d: &Dataset, dir: &Path) -> Result<(), CliError> {
    if d.f_dim != state.model.input_dim || d.n_classes() != state.model.n_classes() {
        return Err(CliError::Core(bpl_core::Error::Schema {
            path: dir.to_path_buf(),
            message: format!(
                "data has F = {} and {} classes, the model expects F = {} and {} classes",
                d.f_dim,
                d.n_classes(),
                state.model.input_dim,
                state.model.n_classes()
            ),
        }));
    }
    Ok(())
}

/// A grid of training runs sharing data, split and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Everything except front kind, size and initializer.
    pub base: ExperimentConfig,
    /// The identity baseline is always trained in addition to these.
    pub fronts: Vec<FrontKind>,
    pub sizes: Vec<usize>,
    pub initializers: Vec<InitMethod>,
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            base: ExperimentConfig::benchmark(),
            fronts: vec![
                FrontKind::UnitVectorization,
                FrontKind::FullyConnected,
                FrontKind::Bpl,
            ],
            sizes: vec![24, 48, 72],
            initializers: InitMethod::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub front: FrontKind,
    pub size: Option<usize>,
    pub initializer: Option<InitMethod>,
}

impl CellKey {
    pub fn label(&self) -> String {
        let mut s = self.front.name().to_string();
        if let Some(n) = self.size {
            write!(s, "/N={n}").expect("writing to a String");
        }
        if let Some(m) = self.initializer {
            write!(s, "/{}", m.name()).expect("writing to a String");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    pub final_loss: f64,
    /// Percent change of micro-F1 over the baseline of the same seed.
    pub micro_f1_change_pct: Option<f64>,
    pub macro_f1_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(flatten)]
    pub key: CellKey,
    pub seed: u64,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result: Option<CellResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<CellError>,
}

/// Seed-averaged view of one grid position (only over seeds that succeeded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub key: CellKey,
    pub n_seeds: usize,
    pub mean_micro_f1: Option<f64>,
    pub mean_macro_f1: Option<f64>,
    pub mean_sparsity_after: Option<f64>,
    pub micro_f1_change_pct: Option<f64>,
    pub macro_f1_change_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub config: CompareConfig,
    pub cells: Vec<Cell>,
    pub summary: Vec<CellSummary>,
}

impl ComparisonReport {
    pub fn summary_for(&self, key: &CellKey) -> Option<&CellSummary> {
        self.summary.iter().find(|s| &s.key == key)
    }
}

pub fn baseline_key() -> CellKey {
    CellKey {
        front: FrontKind::Identity,
        size: None,
        initializer: None,
    }
}

/// Grid positions in report order: baseline first, then each requested front.
pub fn grid_keys(c: &CompareConfig) -> Vec<CellKey> {
    let mut keys = vec![baseline_key()];
    for &front in &c.fronts {
        match front {
            FrontKind::Identity => {}
            FrontKind::UnitVectorization => keys.push(CellKey {
                front,
                size: None,
                initializer: None,
            }),
            FrontKind::FullyConnected => keys.extend(c.sizes.iter().map(|&n| CellKey {
                front,
                size: Some(n),
                initializer: None,
            })),
            FrontKind::Bpl => {
                for &n in &c.sizes {
                    keys.extend(c.initializers.iter().map(|&m| CellKey {
                        front,
                        size: Some(n),
                        initializer: Some(m),
                    }));
                }
            }
        }
    }
    keys
}

fn validate_compare(c: &CompareConfig) -> Result<(), CliError> {
    c.base.validate()?;
    if c.seeds.is_empty() {
        return Err(CliError::Config("compare needs at least one seed".into()));
    }
    if c.fronts.iter().any(|f| f.is_sized()) && c.sizes.is_empty() {
        return Err(CliError::Config("sized fronts need at least one size".into()));
    }
    if c.fronts.contains(&FrontKind::Bpl) && c.initializers.is_empty() {
        return Err(CliError::Config("bpl cells need at least one initializer".into()));
    }
    if c.sizes.contains(&0) {
        return Err(CliError::Config("sizes must be positive".into()));
    }
    Ok(())
}

fn cell_config(base: &ExperimentConfig, key: &CellKey, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.front.kind = key.front;
    c.front.size = key.size;
    if let Some(m) = key.initializer {
        c.init.method = m;
    }
    c
}

fn run_cell(config: &ExperimentConfig, dataset: &Dataset) -> Result<CellResult, CliError> {
    let prepared = prepare_with(config, dataset.clone())?;
    let mut state = TrainState::new(&prepared)?;
    run_training(&mut state, &prepared, u64::MAX, |_| Ok(()))?;
    let eval_idx = if prepared.test.is_empty() {
        &prepared.train
    } else {
        &prepared.test
    };
    let m = evaluate(&state.model, &prepared.dataset, eval_idx, config.threshold)?;
    Ok(CellResult {
        micro_f1: m.micro_f1,
        macro_f1: m.macro_f1,
        sparsity_before: m.sparsity_before,
        sparsity_after: m.sparsity_after,
        final_loss: state.loss_history.last().copied().unwrap_or(f64::NAN),
        micro_f1_change_pct: None,
        macro_f1_change_pct: None,
    })
}

fn pct_change(value: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (value - baseline) / baseline)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains every cell of the grid on held-out evaluation. Cell failures are
/// recorded in the report; only config and data problems abort.
pub fn compare(config: &CompareConfig) -> Result<ComparisonReport, CliError> {
    validate_compare(config)?;
    let dataset = load_data(&config.base.data)?;
    let keys = grid_keys(config);
    let total = keys.len() * config.seeds.len();
    let mut cells = Vec::with_capacity(total);
    for &seed in &config.seeds {
        for key in &keys {
            log::info!(
                "cell {}/{}: {} seed {seed}",
                cells.len() + 1,
                total,
                key.label()
            );
            let c = cell_config(&config.base, key, seed);
            let (result, error) = match run_cell(&c, &dataset) {
                Ok(r) => (Some(r), None),
                Err(e @ (CliError::Capacity { .. } | CliError::Numerical(_))) => {
                    log::warn!("{}: {e}", key.label());
                    (
                        None,
                        Some(CellError {
                            kind: e.kind().into(),
                            message: e.to_string(),
                        }),
                    )
                }
                Err(CliError::Core(e)) if matches!(e, bpl_core::Error::Numerical(_)) => {
                    log::warn!("{}: {e}", key.label());
                    (
                        None,
                        Some(CellError {
                            kind: "numerical".into(),
                            message: e.to_string(),
                        }),
                    )
                }
                Err(e) => return Err(e),
            };
            cells.push(Cell {
                key: key.clone(),
                seed,
                steps: c.steps,
                result,
                error,
            });
        }
    }

    let baseline: BTreeMap<u64, (f64, f64)> = cells
        .iter()
        .filter(|c| c.key == baseline_key())
        .filter_map(|c| c.result.as_ref().map(|r| (c.seed, (r.micro_f1, r.macro_f1))))
        .collect();
    for cell in &mut cells {
        if let (Some(r), Some(&(base_micro, base_macro))) = (cell.result.as_mut(), baseline.get(&cell.seed)) {
            r.micro_f1_change_pct = pct_change(r.micro_f1, base_micro);
            r.macro_f1_change_pct = pct_change(r.macro_f1, base_macro);
        }
    }

    let summarize = |key: &CellKey| {
        let ok: Vec<&CellResult> = cells
            .iter()
            .filter(|c| &c.key == key)
            .filter_map(|c| c.result.as_ref())
            .collect();
        let field = |f: fn(&CellResult) -> f64| mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        (
            ok.len(),
            field(|r| r.micro_f1),
            field(|r| r.macro_f1),
            field(|r| r.sparsity_after),
        )
    };
    let (_, base_micro, base_macro, _) = summarize(&baseline_key());
    let summary = keys
        .iter()
        .map(|key| {
            let (n, micro, macro_, sparsity) = summarize(key);
            CellSummary {
                key: key.clone(),
                n_seeds: n,
                mean_micro_f1: micro,
                mean_macro_f1: macro_,
                mean_sparsity_after: sparsity,
                micro_f1_change_pct: micro.zip(base_micro).and_then(|(v, b)| pct_change(v, b)),
                macro_f1_change_pct: macro_.zip(base_macro).and_then(|(v, b)| pct_change(v, b)),
            }
        })
        .collect();

    Ok(ComparisonReport {
        schema: COMPARISON_SCHEMA.into(),
        config: config.clone(),
        cells,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per cell; failed cells carry their error kind and empty metrics.
pub fn comparison_csv(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "front,size,initializer,seed,steps,micro_f1,macro_f1,sparsity_after,micro_f1_change_pct,macro_f1_change_pct,error\n",
    );
    for c in &report.cells {
        let r = c.result.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.key.front.name(),
            c.key.size.map(|n| n.to_string()).unwrap_or_default(),
            c.key.initializer.map(|m| m.name()).unwrap_or_default(),
            c.seed,
            c.steps,
            opt(r.map(|r| r.micro_f1)),
            opt(r.map(|r| r.macro_f1)),
            opt(r.map(|r| r.sparsity_after)),
            opt(r.and_then(|r| r.micro_f1_change_pct)),
            opt(r.and_then(|r| r.macro_f1_change_pct)),
            c.error.as_ref().map(|e| e.kind.as_str()).unwrap_or_default(),
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_comparison(report: &ComparisonReport, out: &Path) -> Result<(), CliError> {
    write_file(&out.join(COMPARE_CONFIG_FILE), to_pretty_json(&report.config))?;
    write_file(&out.join(COMPARISON_JSON_FILE), to_pretty_json(report))?;
    write_file(&out.join(COMPARISON_CSV_FILE), comparison_csv(report))
}

pub struct InspectOptions<'a> {
    pub checkpoint: &'a Path,
    /// Take the "initial" set from this checkpoint's bases instead of the
    /// starting bases stored in `checkpoint`.
    pub initial: Option<&'a Path>,
    pub include_initial: bool,
    pub include_svd: bool,
    pub include_nmf: bool,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
}

fn bpl_bases(state: &TrainState, path: &Path) -> Result<Matrix, CliError> {
    match &state.model.front {
        FrontLayer::Bpl(b) => Ok(b.bases().clone()),
        other => Err(CliError::Core(bpl_core::Error::InvalidArgument(format!(
            "{} has a {} front, not a basis-projected one",
            path.display(),
            other.kind()
        )))),
    }
}

/// Writes the 2-D embedding of the learned bases plus the requested reference
/// sets; returns the set names in file order.
pub fn inspect_bases(opts: &InspectOptions) -> Result<Vec<String>, CliError> {
    let state = checkpoint::load(opts.checkpoint)?;
    let learned = bpl_bases(&state, opts.checkpoint)?;
    let n = learned.rows();
    let mut sets = vec![("learned".to_string(), learned)];
    if opts.include_initial {
        let initial = match opts.initial {
            Some(p) => bpl_bases(&checkpoint::load(p)?, p)?,
            None => state
                .initial_bases
                .clone()
                .ok_or_else(|| CliError::Data("checkpoint stores no initial bases".into()))?,
        };
        sets.push(("initial".to_string(), initial));
    }
    if opts.include_svd || opts.include_nmf {
        let mut config = state.config.clone();
        if let Some(d) = opts.data {
            config.data = DataSource::Path(d.to_path_buf());
        }
        let prepared = prepare(&config)?;
        let data = factorization_data(&prepared)?;
        if opts.include_svd {
            let svd = svd_top_k(&data, n)?;
            sets.push(("svd".to_string(), svd.right_vectors.transpose()));
        }
        if opts.include_nmf {
            let nmf = nmf_factorize(&data, n, config.init.nmf_iterations, config.seed)?;
            sets.push(("nmf".to_string(), nmf.h));
        }
    }
    prepare_output_dir(opts.out, true)?;
    export_basis_embedding(&sets, &opts.out.join(EMBEDDING_FILE))?;
    Ok(sets.into_iter().map(|(name, _)| name).collect())
}
