//! Seeded training and evaluation loop.
//!
//! Batches are a pure function of `(seed, step)`: the training indices are
//! reshuffled every epoch by a seed derived from the epoch number, so a run
//! resumed from a checkpoint draws exactly the batches it would have drawn.

use bpl_core::bpl::{init_bases, BasisSet, InitSpec};
use bpl_core::data::{generate_synthetic, load_dataset, split_indices, Dataset, ZERO_THRESHOLD};
use bpl_core::linalg::Matrix;
use bpl_core::metrics::{threshold_predict, ConfusionCounts, MetricsReport};
use bpl_core::nn::{bce_loss, sigmoid, ClassifierModel, Dense, FrontLayer};
use bpl_core::optim::{AdamState, CosineSchedule};
use bpl_core::rng::{derive_seed, seeded};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, FrontKind};
use crate::error::CliError;

// sub-stream labels for derive_seed
const STREAM_SPLIT: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_FRONT: u64 = 3;
const STREAM_FACTOR_ROWS: u64 = 4;
const STREAM_EPOCH: u64 = 1 << 32;

const EVAL_BATCH: usize = 32;

pub fn load_data(source: &DataSource) -> Result<Dataset, CliError> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec).map_err(|e| match e {
            bpl_core::Error::InvalidArgument(m) => CliError::Config(m),
            other => other.into(),
        }),
        DataSource::Path(p) => Ok(load_dataset(p)?),
    }
}

/// A validated config bound to its data and split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    config.validate()?;
    let dataset = load_data(&config.data)?;
    prepare_with(config, dataset)
}

/// Like [`prepare`] with already-loaded data (the config's data source is kept
/// in the resolved config for the record).
pub fn prepare_with(config: &ExperimentConfig, dataset: Dataset) -> Result<Prepared, CliError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CliError::Data("dataset has no samples".into()));
    }
    let (train, test) = if config.test_fraction == 0.0 {
        (dataset.all_indices(), Vec::new())
    } else {
        split_indices(
            dataset.len(),
            config.test_fraction,
            derive_seed(config.seed, STREAM_SPLIT),
        )?
    };
    if train.is_empty() {
        return Err(CliError::Data("split left no training samples".into()));
    }

    let mut resolved = config.clone();
    let f = dataset.f_dim;
    resolved.front.size = Some(if resolved.front.kind.is_sized() {
        config.front.size.unwrap_or(f)
    } else {
        f
    });
    resolved.model.n_classes = dataset.n_classes();
    resolved.validate_against(f, train.len() * dataset.t_dim)?;
    Ok(Prepared {
        config: resolved,
        dataset,
        train,
        test,
    })
}

/// Non-zero training elements for the factorization initializers, subsampled
/// by seed down to `max_factorization_rows` (original order kept).
pub fn factorization_data(prepared: &Prepared) -> Result<Matrix, CliError> {
    let d = &prepared.dataset;
    let mut rows: Vec<&[f64]> = Vec::new();
    for &i in &prepared.train {
        let m = &d.samples[i].intensities;
        for t in 0..m.rows() {
            let row = m.row(t);
            if row.iter().any(|v| v.abs() >= ZERO_THRESHOLD) {
                rows.push(row);
            }
        }
    }
    let cap = prepared.config.init.max_factorization_rows;
    if rows.len() > cap {
        let mut keep: Vec<usize> = (0..rows.len()).collect();
        keep.shuffle(&mut seeded(derive_seed(
            prepared.config.seed,
            STREAM_FACTOR_ROWS,
        )));
        keep.truncate(cap);
        keep.sort_unstable();
        rows = keep.into_iter().map(|i| rows[i]).collect();
    }
    let n = rows.len();
    Ok(Matrix::from_vec(n, d.f_dim, rows.concat())?)
}

pub fn build_front(prepared: &Prepared) -> Result<FrontLayer, CliError> {
    let c = &prepared.config;
    let f = prepared.dataset.f_dim;
    let n = c.front.size.unwrap_or(f);
    let seed = derive_seed(c.seed, STREAM_FRONT);
    Ok(match c.front.kind {
        FrontKind::Identity => FrontLayer::Identity,
        FrontKind::UnitVectorization => FrontLayer::UnitVectorization,
        FrontKind::FullyConnected => FrontLayer::FullyConnected(Dense::uniform(f, n, seed)),
        FrontKind::Bpl => {
            let mut spec = InitSpec::new(c.init.method, seed);
            spec.concentration = c.init.concentration;
            spec.center = c.init.center.clone();
            spec.nmf_iterations = c.init.nmf_iterations;
            if c.init.method.needs_data() {
                spec.data = Some(factorization_data(prepared)?);
            }
            let bases = init_bases(&spec, n, f).map_err(|e| match e {
                bpl_core::Error::Capacity {
                    requested,
                    available,
                } => CliError::Capacity {
                    requested,
                    available,
                },
                other => other.into(),
            })?;
            FrontLayer::Bpl(
                bases
                    .with_norm_type(c.front.norm_type)?
                    .with_denominator(c.front.denominator),
            )
        }
    })
}

/// Same architecture as [`build_front`] would produce, parameters zeroed.
pub fn skeleton_front(config: &ExperimentConfig, f: usize) -> Result<FrontLayer, CliError> {
    let n = config.front.size.unwrap_or(f);
    Ok(match config.front.kind {
        FrontKind::Identity => FrontLayer::Identity,
        FrontKind::UnitVectorization => FrontLayer::UnitVectorization,
        FrontKind::FullyConnected => FrontLayer::FullyConnected(Dense {
            weight: Matrix::zeros(n, f),
            bias: vec![0.0; n],
        }),
        FrontKind::Bpl => FrontLayer::Bpl(
            BasisSet::new(Matrix::zeros(n, f))?
                .with_norm_type(config.front.norm_type)?
                .with_denominator(config.front.denominator),
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    /// Mean training loss over the steps since the previous entry.
    pub mean_loss: f64,
    pub train_micro_f1: f64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub model: ClassifierModel,
    pub adam: AdamState,
    pub step: u64,
    pub loss_history: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub initial_bases: Option<Matrix>,
}

impl TrainState {
    pub fn new(prepared: &Prepared) -> Result<Self, CliError> {
        let c = &prepared.config;
        let front = build_front(prepared)?;
        let initial_bases = match &front {
            FrontLayer::Bpl(b) => Some(b.bases().clone()),
            _ => None,
        };
        let model = ClassifierModel::new(
            c.model,
            prepared.dataset.f_dim,
            front,
            derive_seed(c.seed, STREAM_MODEL),
        )?;
        let shapes: Vec<(String, usize)> = model
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p.len()))
            .collect();
        Ok(TrainState {
            config: c.clone(),
            adam: AdamState::new(&c.optim.adam, &shapes),
            model,
            step: 0,
            loss_history: Vec::new(),
            log: Vec::new(),
            initial_bases,
        })
    }

    pub fn schedule(&self) -> Result<CosineSchedule, CliError> {
        Ok(CosineSchedule::new(
            self.config.optim.adam.lr,
            self.config.optim.lr_min,
            self.config.steps,
        )?)
    }
}

/// Training sample indices used at `step`.
pub fn batch_indices(train: &[usize], batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let n = train.len() as u64;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + j;
        let (epoch, offset) = (pos / n, (pos % n) as usize);
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm = train.to_vec();
            perm.shuffle(&mut seeded(derive_seed(seed, STREAM_EPOCH + epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("just filled").1[offset]);
    }
    out
}

/// One optimizer step; returns the batch loss.
pub fn train_step(state: &mut TrainState, prepared: &Prepared) -> Result<f64, CliError> {
    let schedule = state.schedule()?;
    let idx = batch_indices(
        &prepared.train,
        state.config.batch_size,
        state.step,
        state.config.seed,
    );
    let x = prepared.dataset.batch(&idx);
    let y = prepared.dataset.labels(&idx);
    let logits = state.model.forward_train(&x).map_err(|e| match e {
        bpl_core::Error::Numerical(m) => {
            CliError::Numerical(format!("step {}: {m}", state.step + 1))
        }
        other => other.into(),
    })?;
    let loss = bce_loss(&logits, &y)?;
    if !loss.value.is_finite() {
        return Err(CliError::Numerical(format!(
            "non-finite loss {} at step {}",
            loss.value,
            state.step + 1
        )));
    }
    let grads = state.model.backward(&loss)?;
    let lr = schedule.lr_at_step(state.step);
    let mut params = state.model.parameters_mut();
    state
        .adam
        .step(&mut params, &grads.blocks, lr)
        .map_err(|e| match e {
            bpl_core::Error::Numerical(m) => {
                CliError::Numerical(format!("step {}: {m}", state.step + 1))
            }
            other => other.into(),
        })?;
    state.step += 1;
    state.loss_history.push(loss.value);
    Ok(loss.value)
}

/// Trains until `until` (capped at the configured step count), calling
/// `on_checkpoint` at every configured checkpoint interval.
pub fn run_training(
    state: &mut TrainState,
    prepared: &Prepared,
    until: u64,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let until = until.min(state.config.steps);
    let interval = state.config.log_interval;
    while state.step < until {
        train_step(state, prepared)?;
        if state.step % interval == 0 || state.step == state.config.steps {
            let since = state.log.last().map_or(0, |e| e.step) as usize;
            let recent = &state.loss_history[since..];
            let mean_loss = recent.iter().sum::<f64>() / recent.len() as f64;
            let train_micro_f1 =
                evaluate(&state.model, &prepared.dataset, &prepared.train, state.config.threshold)?
                    .micro_f1;
            log::info!(
                "step {:>6}  loss {:.6}  train micro-F1 {:.4}",
                state.step,
                mean_loss,
                train_micro_f1
            );
            state.log.push(LogEntry {
                step: state.step,
                mean_loss,
                train_micro_f1,
            });
        }
        if let Some(every) = state.config.checkpoint_interval {
            if state.step % every == 0 && state.step < state.config.steps {
                on_checkpoint(state)?;
            }
        }
    }
    Ok(())
}

/// Sigmoid probabilities for the given samples, `len × classes`.
pub fn predict_probabilities(
    model: &ClassifierModel,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Matrix, CliError> {
    let k = model.n_classes();
    let mut probs = Vec::with_capacity(indices.len() * k);
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.forward(&dataset.batch(chunk))?;
        probs.extend(logits.as_slice().iter().map(|&z| sigmoid(z)));
    }
    Ok(Matrix::from_vec(indices.len(), k, probs)?)
}

/// Forward-only metrics, including sparsity before and after the front layer.
pub fn evaluate(
    model: &ClassifierModel,
    dataset: &Dataset,
    indices: &[usize],
    threshold: f64,
) -> Result<MetricsReport, CliError> {
    if dataset.f_dim != model.input_dim {
        return Err(CliError::Data(format!(
            "dataset has F = {} but the model expects {}",
            dataset.f_dim, model.input_dim
        )));
    }
    if dataset.n_classes() != model.n_classes() {
        return Err(CliError::Data(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.n_classes(),
            model.n_classes()
        )));
    }
    if indices.is_empty() {
        return Err(CliError::Data("nothing to evaluate".into()));
    }
    let probs = predict_probabilities(model, dataset, indices)?;
    let pred = threshold_predict(&probs, threshold)?;
    let counts = ConfusionCounts::from_predictions(&pred, &dataset.labels(indices))?;

    let (mut zeros_before, mut total_before, mut zeros_after, mut total_after) = (0, 0, 0, 0);
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = dataset.batch(chunk);
        let y = model.front.forward(&x)?;
        zeros_before += x.as_slice().iter().filter(|v| v.abs() < ZERO_THRESHOLD).count();
        total_before += x.as_slice().len();
        zeros_after += y.as_slice().iter().filter(|v| v.abs() < ZERO_THRESHOLD).count();
        total_after += y.as_slice().len();
    }
    Ok(MetricsReport::from_counts(
        &counts,
        &dataset.class_names,
        zeros_before as f64 / total_before as f64,
        zeros_after as f64 / total_after as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let train: Vec<usize> = (10..20).collect();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(&train, 2, s, 9)).collect();
        seen.sort_unstable();
        assert_eq!(seen, train);
        assert_eq!(batch_indices(&train, 3, 7, 1), batch_indices(&train, 3, 7, 1));
        assert_ne!(
            (0..5).flat_map(|s| batch_indices(&train, 2, s, 9)).collect::<Vec<_>>(),
            (5..10).flat_map(|s| batch_indices(&train, 2, s, 9)).collect::<Vec<_>>()
        );
    }
}
