//! Mini-batch SGD with classical momentum, per-epoch held-out evaluation and
//! checkpoint recording.
//!
//! Training never stops early on held-out perplexity. Every evaluated epoch is
//! kept so that [`crate::selection`] can pick a checkpoint past the
//! perplexity minimum.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_posteriors, MetricsRecord};
use crate::model::{Model, Params};
use crate::rff::ProjectionBank;
use crate::rng::{self, Stream};

/// Rows per chunk when computing features for evaluation.
const EVAL_CHUNK: usize = 1_024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplier applied to the learning rate when held-out perplexity stalls.
    pub anneal_factor: f64,
    /// Minimum relative perplexity improvement that counts as progress.
    pub anneal_threshold: f64,
    pub max_epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Precompute training features once instead of per mini-batch.
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 250,
            learning_rate: 1.0,
            momentum: 0.9,
            anneal_factor: 0.5,
            anneal_threshold: 1e-3,
            max_epochs: 20,
            l2: 0.0,
            seed: 0,
            eval_every: 1,
            cache_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return bad(format!("anneal_factor must be in (0, 1], got {}", self.anneal_factor));
        }
        if !(self.anneal_threshold >= 0.0 && self.anneal_threshold < 1.0) {
            return bad(format!("anneal_threshold must be in [0, 1), got {}", self.anneal_threshold));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// One evaluated epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub epoch: usize,
    pub metrics: MetricsRecord,
    /// Name under which the checkpoint was stored, e.g. `ckpt_epoch3.rksm`.
    pub checkpoint: String,
}

/// Per-epoch optimizer statistics, kept alongside the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean mini-batch objective over the epoch.
    pub train_loss: f64,
    /// Learning rate in effect during the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointTrace {
    pub entries: Vec<TraceEntry>,
    pub config: Option<TrainConfig>,
    pub history: Vec<EpochStats>,
}

impl CheckpointTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry with the lowest held-out perplexity; earliest on ties.
    pub fn perplexity_minimum(&self) -> Option<&TraceEntry> {
        self.entries.iter().fold(None, |best: Option<&TraceEntry>, e| match best {
            Some(b) if b.metrics.perplexity <= e.metrics.perplexity => Some(b),
            _ => Some(e),
        })
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.rksm")
}

/// Where checkpoints go during training.
pub trait CheckpointSink {
    /// Persist `model` and return its handle.
    fn save(&mut self, epoch: usize, model: &Model) -> Result<String>;
    fn load(&self, handle: &str) -> Result<Model>;
}

/// Keeps checkpoints in memory.
#[derive(Debug, Default)]
pub struct MemoryCheckpoints {
    models: BTreeMap<String, Model>,
}

impl MemoryCheckpoints {
    pub fn new() -> Self {
        Self::default()
    }
}

impl CheckpointSink for MemoryCheckpoints {
    fn save(&mut self, epoch: usize, model: &Model) -> Result<String> {
        let name = checkpoint_name(epoch);
        self.models.insert(name.clone(), model.clone());
        Ok(name)
    }

    fn load(&self, handle: &str) -> Result<Model> {
        self.models
            .get(handle)
            .cloned()
            .ok_or_else(|| Error::InvalidParameter(format!("unknown checkpoint {handle:?}")))
    }
}

/// Writes `ckpt_epoch{N}.rksm` files into a run directory.
#[derive(Debug, Clone)]
pub struct DirCheckpoints {
    dir: PathBuf,
}

impl DirCheckpoints {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    pub fn path_of(&self, handle: &str) -> PathBuf {
        self.dir.join(handle)
    }
}

impl CheckpointSink for DirCheckpoints {
    fn save(&mut self, epoch: usize, model: &Model) -> Result<String> {
        let name = checkpoint_name(epoch);
        model.save(self.path_of(&name))?;
        Ok(name)
    }

    fn load(&self, handle: &str) -> Result<Model> {
        Model::load(self.path_of(handle))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    /// Loss or parameters became non-finite. `partial` holds every entry
    /// recorded before the failing epoch.
    #[error("training diverged in epoch {epoch}")]
    Diverged {
        epoch: usize,
        partial: Box<CheckpointTrace>,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

/// Classical momentum: `v ← momentum·v − lr·grad`, then `params ← params + v`.
pub fn momentum_update(
    params: &mut Params,
    velocity: &mut Params,
    grads: &Params,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    velocity.combine(momentum, -learning_rate, grads);
    if !velocity.is_finite() {
        return Err(Error::NonFinite("velocity"));
    }
    params.combine(1.0, 1.0, velocity);
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    Ok(())
}

/// One SGD step on a batch of feature rows. Returns the batch objective
/// before the update.
pub fn sgd_step(
    model: &mut Model,
    velocity: &mut Params,
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    learning_rate: f64,
    momentum: f64,
    l2: f64,
) -> Result<f64> {
    let (loss, grads) = model.loss_and_grad(features, labels, l2)?;
    let mut params = model.params().clone();
    momentum_update(&mut params, velocity, &grads, learning_rate, momentum)?;
    model.set_params(params)?;
    Ok(loss)
}

/// Posteriors of every frame, computed in fixed-size chunks.
pub fn predict_posteriors(bank: &ProjectionBank, model: &Model, features: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((features.nrows(), model.num_classes()));
    for (chunk, mut dest) in features
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(out.axis_chunks_iter_mut(Axis(0), EVAL_CHUNK))
    {
        let phi = bank.feature_map_batch(chunk)?;
        dest.assign(&model.posteriors_batch(phi.view())?);
    }
    Ok(out)
}

/// Held-out metrics of `model` on `dataset`.
pub fn evaluate_checkpoint(bank: &ProjectionBank, model: &Model, dataset: &FrameDataset) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dims(bank, model, dataset)?;
    let posteriors = predict_posteriors(bank, model, dataset.features())?;
    evaluate_posteriors(posteriors.view(), dataset.labels())
}

fn check_dims(bank: &ProjectionBank, model: &Model, dataset: &FrameDataset) -> Result<()> {
    if dataset.dim() != bank.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.input_dim(),
            actual: dataset.dim(),
        });
    }
    if model.feature_dim() != bank.num_features() {
        return Err(Error::DimensionMismatch {
            expected: bank.num_features(),
            actual: model.feature_dim(),
        });
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            actual: dataset.num_classes(),
        });
    }
    Ok(())
}

/// Train for `config.max_epochs` epochs, evaluating on `heldout` at epoch 0,
/// every `eval_every` epochs and at the last epoch.
///
/// Each evaluated model is the f32-rounded snapshot that gets stored, so the
/// recorded metrics are exactly those of the checkpoint. The learning rate
/// is multiplied by `anneal_factor` whenever held-out perplexity fails to
/// beat the best value so far by `anneal_threshold` (relative).
pub fn train(
    bank: &ProjectionBank,
    model: Model,
    train_set: &FrameDataset,
    heldout: &FrameDataset,
    config: &TrainConfig,
    sink: &mut dyn CheckpointSink,
) -> std::result::Result<(Model, CheckpointTrace), TrainError> {
    config.validate()?;
    if heldout.is_empty() || train_set.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    check_dims(bank, &model, train_set)?;
    check_dims(bank, &model, heldout)?;
    let model = match model.bank_ref() {
        Some(_) => model,
        None => model.with_bank(bank)?,
    };

    let mut trace = CheckpointTrace {
        entries: Vec::new(),
        config: Some(*config),
        history: Vec::new(),
    };
    let mut model = model;
    let mut velocity = Params::zeros_like(model.params());
    let mut learning_rate = config.learning_rate;
    let mut best_perplexity = f64::INFINITY;

    let cache = if config.cache_features {
        Some(bank.feature_map_batch(train_set.features())?)
    } else {
        None
    };

    let mut record = |epoch: usize, model: &Model, trace: &mut CheckpointTrace| -> Result<f64> {
        let snapshot = model.rounded_to_f32();
        let metrics = evaluate_checkpoint(bank, &snapshot, heldout)?;
        let checkpoint = sink.save(epoch, &snapshot)?;
        trace.entries.push(TraceEntry {
            epoch,
            metrics,
            checkpoint,
        });
        Ok(metrics.perplexity)
    };

    best_perplexity = best_perplexity.min(record(0, &model, &mut trace)?);

    let mut shuffle_rng = rng::seeded(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut frames = 0usize;
        for batch in order.chunks(config.minibatch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let phi = match &cache {
                Some(all) => all.select(Axis(0), batch),
                None => bank.feature_map_batch(train_set.features().select(Axis(0), batch).view())?,
            };
            let step = sgd_step(
                &mut model,
                &mut velocity,
                phi.view(),
                &labels,
                learning_rate,
                config.momentum,
                config.l2,
            );
            match step {
                Ok(loss) => {
                    loss_sum += loss * batch.len() as f64;
                    frames += batch.len();
                }
                Err(Error::NonFinite(_)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        partial: Box::new(trace),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        trace.history.push(EpochStats {
            epoch,
            train_loss: loss_sum / frames as f64,
            learning_rate,
        });

        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let perplexity = match record(epoch, &model, &mut trace) {
                Ok(p) => p,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            if !perplexity.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    partial: Box::new(trace),
                });
            }
            if perplexity > best_perplexity * (1.0 - config.anneal_threshold) {
                learning_rate *= config.anneal_factor;
            }
            best_perplexity = best_perplexity.min(perplexity);
        }
    }
    Ok((model, trace))
}
