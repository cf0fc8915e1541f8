//! Mini-batch training with Adam, a step learning-rate schedule, early
//! stopping and optional MixUp/CutMix or FGSM adversarial batches.

mod adam;
mod config;
mod grid;

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::adversarial_training_step;
use crate::augment::{apply_policy, Technique};
use crate::datapipe::{batches, sequential_batches, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::model::{set_trainable, Checkpoint, FreezeMask, ModelSpec, Params, TrainProgress};
use crate::rng;
use crate::tensor::ops::cross_entropy;
use crate::tensor::Tensor;

pub use adam::{adam_step, step_lr, AdamConfig, AdamState};
pub use config::{ModelOptions, TrainConfig, CONFIG_KEYS};
pub use grid::{grid_search, Grid, GridAxis, GridCell, GridOutcome};

/// Minimum validation-loss decrease that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl EpochRecord {
    /// `epoch train_loss train_acc val_loss val_acc lr`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.lr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_acc).max_by(f64::total_cmp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentLogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub technique: Technique,
    pub lambda: f64,
}

impl AugmentLogEntry {
    pub fn log_line(&self) -> String {
        format!("{} {} {} {:.6}", self.epoch, self.batch, self.technique, self.lambda)
    }
}

/// Adam state plus the current learning rate and freeze mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub state: AdamState<f32>,
    pub mask: FreezeMask,
    pub lr: f64,
}

impl Optimizer {
    pub fn new(params: &Params<f32>, config: AdamConfig, mask: FreezeMask, lr: f64) -> Self {
        Self {
            config,
            state: AdamState::new(params),
            mask,
            lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Training-mode probabilities, `N,K`.
    pub probs: Tensor<f32>,
}

/// Forward (training mode), backward and one Adam update on soft targets.
pub fn train_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &mut Params<f32>,
    optimizer: &mut Optimizer,
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
    rng: &mut R,
) -> Result<StepOutput> {
    let mut fwd = spec.forward(params, images, true, false, rng)?;
    let (loss, mut grads) = fwd.backward_loss(targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    let g = fwd.param_grads(&mut grads);
    adam_step(params, &g, &mut optimizer.state, optimizer.lr, &optimizer.config, &optimizer.mask)?;
    Ok(StepOutput {
        loss: loss as f64,
        probs: fwd.probs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Inference probabilities, `N,K`, in sample order.
    pub probabilities: Tensor<f32>,
}

/// Inference-mode loss, accuracy and probabilities over `samples`.
pub fn evaluate(spec: &ModelSpec, params: &Params<f32>, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let mut probs = Vec::with_capacity(samples.len() * spec.num_classes);
    let mut loss_sum = 0.0;
    let mut labels = Vec::with_capacity(samples.len());
    for batch in sequential_batches(samples, batch_size) {
        let batch = batch?;
        let p = spec.predict(params, &batch.images)?;
        let t = Tensor::one_hot(&batch.labels, spec.num_classes)?;
        loss_sum += cross_entropy(&p, &t)? as f64 * batch.len() as f64;
        probs.extend_from_slice(p.data());
        labels.extend(batch.labels);
    }
    let probabilities = Tensor::new(vec![samples.len(), spec.num_classes], probs)?;
    let predictions = probabilities.argmax_rows();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
        labels,
        predictions,
        probabilities,
    })
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numeric() {
        Error::Diverged { epoch, batch }
    } else {
        e
    }
}

/// Epoch-at-a-time training driver. Its state after any epoch can be saved
/// with [`Trainer::checkpoint`] and resumed bit-exactly.
pub struct Trainer {
    config: TrainConfig,
    spec: ModelSpec,
    params: Params<f32>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    epoch: usize,
    progress: Option<TrainProgress>,
    augment_log: Vec<AugmentLogEntry>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best_params: Params<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub history: TrainHistory,
    pub augment_log: Vec<AugmentLogEntry>,
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: ModelSpec) -> Result<Self> {
        let params = spec.init_params(config.seed)?;
        Self::with_params(config, spec, params)
    }

    /// Starts from given (e.g. pretrained) weights.
    pub fn with_params(config: TrainConfig, spec: ModelSpec, params: Params<f32>) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let mask = set_trainable(&spec, config.freeze_depth)?;
        let optimizer = Optimizer::new(&params, config.adam, mask, config.initial_lr);
        Ok(Self {
            rng: rng::derive(config.seed, rng::DOMAIN_TRAIN, 0),
            config,
            spec,
            params,
            optimizer,
            epoch: 0,
            progress: None,
            augment_log: Vec::new(),
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`]. The checkpoint's
    /// freeze depth wins over the config's.
    pub fn resume(mut config: TrainConfig, ck: Checkpoint) -> Result<Self> {
        config.freeze_depth = ck.freeze_depth;
        config.validate()?;
        let mask = ck.freeze_mask()?;
        Ok(Self {
            rng: ck.rng.restore()?,
            optimizer: Optimizer {
                config: config.adam,
                state: ck.optimizer,
                mask,
                lr: config.initial_lr,
            },
            config,
            spec: ck.spec,
            params: ck.params,
            epoch: ck.epoch,
            progress: ck.progress,
            augment_log: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> Option<&TrainHistory> {
        self.progress.as_ref().map(|p| &p.history)
    }

    pub fn augment_log(&self) -> &[AugmentLogEntry] {
        &self.augment_log
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.progress.as_ref().is_some_and(|p| p.stopped_early)
    }

    /// Resumable snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self.params.clone(),
            freeze_depth: self.config.freeze_depth,
            optimizer: self.optimizer.state.clone(),
            epoch: self.epoch,
            rng: crate::model::RngState::capture(&self.rng),
            progress: self.progress.clone(),
        }
    }

    /// Runs one epoch; `None` once training is finished.
    pub fn step_epoch(&mut self, split: &DatasetSplit) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let start = Instant::now();
        let epoch = self.epoch;
        let cfg = &self.config;
        let lr = step_lr(cfg.initial_lr, epoch, cfg.step_size, cfg.gamma);
        self.optimizer.lr = lr;
        let classes = self.spec.num_classes;
        let adversarial = cfg.attack.epsilon > 0.0 && cfg.attack.adversarial_fraction > 0.0;

        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, batch) in batches(&split.train, cfg.batch_size, cfg.seed, epoch)?.enumerate() {
            let batch = batch?;
            let targets = Tensor::one_hot(&batch.labels, classes)?;
            let (x, y, record) = apply_policy(&cfg.augment, &batch.images, &targets, &mut self.rng)?;
            if cfg.augment.is_enabled() {
                self.augment_log.push(AugmentLogEntry {
                    epoch,
                    batch: b,
                    technique: record.technique,
                    lambda: record.lambda,
                });
            }
            let out = if adversarial {
                adversarial_training_step(
                    &self.spec,
                    &mut self.params,
                    &mut self.optimizer,
                    &x,
                    &y,
                    &cfg.attack,
                    &mut self.rng,
                )
                .map(|s| s.step)
            } else {
                train_step(&self.spec, &mut self.params, &mut self.optimizer, &x, &y, &mut self.rng)
            }
            .map_err(|e| diverged(e, epoch, b))?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out
                .probs
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::InvalidArgument("the training split is empty".into()));
        }

        let val = evaluate(&self.spec, &self.params, &split.validation, cfg.batch_size)
            .map_err(|e| diverged(e, epoch, 0))?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };

        let patience = cfg.patience;
        match &mut self.progress {
            None => {
                self.progress = Some(TrainProgress {
                    best_params: self.params.clone(),
                    best_val_loss: val.loss,
                    best_epoch: epoch,
                    bad_epochs: 0,
                    stopped_early: false,
                    history: TrainHistory {
                        epochs: vec![record.clone()],
                    },
                });
            }
            Some(p) => {
                p.history.epochs.push(record.clone());
                if val.loss < p.best_val_loss - MIN_DELTA {
                    p.best_params = self.params.clone();
                    p.best_val_loss = val.loss;
                    p.best_epoch = epoch;
                    p.bad_epochs = 0;
                } else {
                    p.bad_epochs += 1;
                    if p.bad_epochs >= patience {
                        p.stopped_early = true;
                    }
                }
            }
        }
        self.epoch += 1;
        Ok(Some(record))
    }

    pub fn run(&mut self, split: &DatasetSplit) -> Result<()> {
        while self.step_epoch(split)?.is_some() {}
        Ok(())
    }

    /// Final result with the best weights restored.
    pub fn outcome(&self) -> TrainOutcome {
        match &self.progress {
            Some(p) => TrainOutcome {
                best_params: p.best_params.clone(),
                best_epoch: p.best_epoch,
                best_val_loss: p.best_val_loss,
                stopped_early: p.stopped_early,
                history: p.history.clone(),
                augment_log: self.augment_log.clone(),
            },
            None => TrainOutcome {
                best_params: self.params.clone(),
                best_epoch: 0,
                best_val_loss: f64::NAN,
                stopped_early: false,
                history: TrainHistory::default(),
                augment_log: self.augment_log.clone(),
            },
        }
    }
}

/// Trains from scratch to completion.
pub fn train(config: &TrainConfig, spec: &ModelSpec, split: &DatasetSplit) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), spec.clone())?;
    t.run(split)?;
    Ok(t.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::generate_synthetic;

    fn tiny_split(seed: u64) -> DatasetSplit {
        let set = generate_synthetic(12, 3, 12, seed).unwrap();
        crate::datapipe::split(set.samples, &set.class_names, seed).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig {
            epochs: 3,
            batch_size: 8,
            initial_lr: 5e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        c.model.filters = vec![4, 6];
        c.model.hidden_width = 8;
        c
    }

    fn spec_for(c: &TrainConfig, split: &DatasetSplit) -> ModelSpec {
        c.model.spec(split.num_classes(), (12, 12))
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord {
            epoch: 2,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: 1.0 / 3.0,
            val_acc: 1.0,
            lr: 2.5e-4,
            wall_time: 0.0,
        };
        assert_eq!(r.log_line(), "2 0.500000 0.750000 0.333333 1.000000 0.000250");
    }

    #[test]
    fn runs_are_reproducible() {
        let split = tiny_split(1);
        let c = tiny_config();
        let spec = spec_for(&c, &split);
        let a = train(&c, &spec, &split).unwrap();
        let b = train(&c, &spec, &split).unwrap();
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.history.epochs.len(), 3);
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!((x.train_loss, x.val_loss), (y.train_loss, y.val_loss));
        }
    }

    #[test]
    fn zero_lr_stops_after_patience() {
        let split = tiny_split(2);
        let mut c = tiny_config();
        c.initial_lr = 0.0;
        c.patience = 1;
        c.epochs = 10;
        let spec = spec_for(&c, &split);
        let out = train(&c, &spec, &split).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.epochs.len(), 2);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn augmentation_is_logged_per_batch() {
        let split = tiny_split(3);
        let mut c = tiny_config();
        c.epochs = 1;
        c.augment.mixup_alpha = 0.4;
        c.augment.cutmix_alpha = 1.0;
        let spec = spec_for(&c, &split);
        let out = train(&c, &spec, &split).unwrap();
        let n_batches = split.train.len().div_ceil(c.batch_size);
        assert_eq!(out.augment_log.len(), n_batches);
        assert!(out.augment_log.iter().all(|e| e.lambda > 0.0 && e.lambda <= 1.0));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let split = tiny_split(4);
        let mut c = tiny_config();
        c.epochs = 1;
        let spec = spec_for(&c, &split);
        let mut params = spec.init_params::<f32>(0).unwrap();
        params["head.output.bias"].data_mut()[0] = f32::NAN;
        let mut t = Trainer::with_params(c, spec, params).unwrap();
        match t.step_epoch(&split) {
            Err(Error::Diverged { epoch: 0, batch: 0 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
