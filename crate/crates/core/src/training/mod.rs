//! Training loop: a fresh set of mixtures every epoch, minibatch uPIT SD-SDR
//! loss, Adam with an exponentially decaying learning rate and dynamic loss scaling.

pub mod mixing;
pub mod optim;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::loss::{upit, upit_with_grad, ZeroReferencePolicy};
use crate::model::params::Grads;
use crate::model::{Mode, Model};
use crate::waveforms::library::{record_seed, SignalSource};
pub use mixing::{build_mixture, build_mixture_from, build_mixtures, build_test_set, mix_chunks, test_pairs, ChunkOrigin, MixtureConfig, MixtureSample};
pub use optim::{lr_schedule, Adam, AdamConfig, DynamicLossScaler, ScaleOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mixture: MixtureConfig,
    pub zero_reference: ZeroReferencePolicy,
    pub initial_loss_scale: f64,
    /// Consecutive skipped steps tolerated before training aborts.
    pub max_skipped_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 2,
            pairs_per_epoch: 3000,
            lr0: 1e-4,
            lr_decay: 0.9,
            adam: AdamConfig::default(),
            seed: 0,
            mixture: MixtureConfig::default(),
            zero_reference: ZeroReferencePolicy::Skip,
            initial_loss_scale: 32768.0,
            max_skipped_steps: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return param("batch size and pairs per epoch must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.initial_loss_scale > 0.0) {
            return param("learning rate, decay and loss scale must be positive");
        }
        self.mixture.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss_sim: Option<f64>,
    pub test_loss_real: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,test_loss_sim,test_loss_real\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, opt(r.test_loss_sim), opt(r.test_loss_real));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean uPIT loss over the usable samples of the batch.
    pub loss: f64,
    pub applied: bool,
    /// Samples whose references were both silent.
    pub skipped_samples: usize,
}

/// Mean uPIT loss and summed gradient over a batch (unnormalized by scale).
struct BatchGradient {
    loss_sum: f64,
    used: usize,
    grads: Grads,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub scaler: DynamicLossScaler,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mixture.window_len != model.config.window_len {
            return param(format!(
                "mixture window {} differs from model window {}",
                config.mixture.window_len, model.config.window_len
            ));
        }
        Ok(Self {
            optimizer: Adam::new(&model.store, config.adam),
            scaler: DynamicLossScaler::new(config.initial_loss_scale),
            model,
            config,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn batch_gradient(&self, batch: &[MixtureSample], dropout_seed: u64) -> Result<BatchGradient> {
        let model = &self.model;
        let policy = self.config.zero_reference;
        let scale = self.scaler.scale;
        let per_sample = batch
            .par_iter()
            .enumerate()
            .map(|(i, sample)| -> Result<Option<(f64, Grads)>> {
                let mode = Mode::Train {
                    seed: record_seed(dropout_seed, i as u64),
                };
                let (tape, out) = model.forward_with_tape(&sample.mixture, mode)?;
                let truths = [&sample.truths[0][..], &sample.truths[1][..]];
                let (outcome, mut dout) = match upit_with_grad(truths, [&out[0], &out[1]], policy) {
                    Ok(v) => v,
                    Err(Error::ZeroReference) if policy == ZeroReferencePolicy::Skip => return Ok(None),
                    Err(e) => return Err(e),
                };
                dout.iter_mut().flatten().for_each(|v| *v *= scale);
                let mut g = Grads::zeros_like(&model.store);
                model.backward(&tape, [&dout[0], &dout[1]], &mut g)?;
                Ok(Some((outcome.loss, g)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = BatchGradient {
            loss_sum: 0.0,
            used: 0,
            grads: Grads::zeros_like(&model.store),
        };
        for (loss, g) in per_sample.into_iter().flatten() {
            total.loss_sum += loss;
            total.used += 1;
            total.grads.add_assign(&g);
        }
        Ok(total)
    }

    /// One optimizer step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[MixtureSample], lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return param("empty batch");
        }
        let seed = record_seed(self.config.seed ^ 0x5EED, self.steps);
        self.steps += 1;
        let BatchGradient { loss_sum, used, mut grads } = self.batch_gradient(batch, seed)?;
        let skipped_samples = batch.len() - used;
        if used == 0 {
            return Ok(StepReport {
                loss: f64::NAN,
                applied: false,
                skipped_samples,
            });
        }
        grads.scale(1.0 / used as f64);
        let loss = loss_sum / used as f64;
        let applied = loss.is_finite() && self.scaler.unscale(&mut grads) == ScaleOutcome::Apply;
        if applied {
            self.optimizer.step(&mut self.model.store, &grads, lr);
        }
        Ok(StepReport {
            loss,
            applied,
            skipped_samples,
        })
    }

    /// One pass over a freshly drawn set of mixtures. Returns the mean loss and the number of skipped steps.
    pub fn train_epoch(&mut self, lib: &dyn SignalSource, epoch: usize) -> Result<(f64, usize)> {
        let lr = lr_schedule(self.config.lr0, self.config.lr_decay, epoch);
        let mixtures = build_mixtures(lib, self.config.pairs_per_epoch, &self.config.mixture, record_seed(self.config.seed, epoch as u64))?;
        let (mut loss_sum, mut counted, mut skipped, mut run) = (0.0, 0usize, 0usize, 0usize);
        for batch in mixtures.chunks(self.config.batch_size) {
            let report = self.train_step(batch, lr)?;
            if report.applied {
                run = 0;
            } else {
                skipped += 1;
                run += 1;
                if run > self.config.max_skipped_steps {
                    return Err(Error::Numeric(format!(
                        "{run} consecutive steps skipped in epoch {epoch} (last loss {}, loss scale {})",
                        report.loss, self.scaler.scale
                    )));
                }
            }
            if report.loss.is_finite() {
                loss_sum += report.loss;
                counted += 1;
            }
        }
        let mean = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        Ok((mean, skipped))
    }

    /// Runs all epochs. `on_epoch` sees every record as soon as it is complete.
    pub fn train(
        &mut self,
        lib: &dyn SignalSource,
        test_sim: Option<&[MixtureSample]>,
        test_real: Option<&[MixtureSample]>,
        mut on_epoch: impl FnMut(&EpochRecord, &Model),
    ) -> Result<History> {
        let mut history = History::default();
        for epoch in 0..self.config.epochs {
            let (train_loss, skipped_steps) = self.train_epoch(lib, epoch)?;
            let policy = self.config.zero_reference;
            let test_loss_sim = test_sim.map(|s| mean_loss(&self.model, s, policy)).transpose()?;
            let test_loss_real = test_real.map(|s| mean_loss(&self.model, s, policy)).transpose()?;
            let record = EpochRecord {
                epoch,
                lr: lr_schedule(self.config.lr0, self.config.lr_decay, epoch),
                train_loss,
                test_loss_sim,
                test_loss_real,
                skipped_steps,
            };
            log::info!(
                "epoch {epoch}: train {train_loss:.3} test {:?} lr {:.3e}",
                record.test_loss_sim,
                record.lr
            );
            on_epoch(&record, &self.model);
            history.epochs.push(record);
        }
        Ok(history)
    }
}

/// Mean inference-mode uPIT loss over samples (windows of the model length; longer samples are split).
pub fn mean_loss(model: &Model, samples: &[MixtureSample], policy: ZeroReferencePolicy) -> Result<f64> {
    let windows: Vec<MixtureSample> = samples
        .iter()
        .map(|s| s.windows(model.config.window_len))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let losses = windows
        .par_iter()
        .map(|w| -> Result<Option<f64>> {
            let out = model.forward(&w.mixture, Mode::Inference)?;
            match upit([&w.truths[0], &w.truths[1]], [&out[0], &out[1]], policy) {
                Ok(o) => Ok(Some(o.loss)),
                Err(Error::ZeroReference) if policy == ZeroReferencePolicy::Skip => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<f64> = losses.into_iter().flatten().collect();
    if valid.is_empty() {
        return param("no evaluable samples");
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}
