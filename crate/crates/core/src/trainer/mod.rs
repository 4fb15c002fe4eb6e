//! Minibatch training, evaluation, checkpointing and the per-epoch run record.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_step, Graph, SgdState};
use crate::backbone::{total_training_loss, SfeModel};
use crate::data::{epoch_order, make_batch, plain_batch, LabeledImageDataset, Normalization};
use crate::error::{ensure, Result, SfeError};
use crate::inference::{accuracy, InferenceScheme};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, RngState};
pub use config::{BatchConfig, ExperimentConfig, ScheduleConfig, Seeds};
pub use metrics::{append_record, read_records, EpochRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.sfe";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub joint: f64,
    pub kl: Option<f64>,
}

/// Augmentation generator of epoch `epoch`, independent of the shuffle stream.
pub fn augment_rng(data_seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream((1u64 << 32) | epoch as u64);
    rng
}

/// Accuracy of `model` on `ds` under `scheme`, without augmentation.
pub fn evaluate<T: Scalar>(
    model: &SfeModel<T>,
    ds: &LabeledImageDataset,
    norm: &Normalization,
    scheme: InferenceScheme,
    batch: usize,
) -> Result<f64> {
    Ok(predict(model, ds, norm, scheme, batch)?.1)
}

/// Class probabilities `[M, N]` for a whole dataset, plus accuracy.
pub fn predict<T: Scalar>(
    model: &SfeModel<T>,
    ds: &LabeledImageDataset,
    norm: &Normalization,
    scheme: InferenceScheme,
    batch: usize,
) -> Result<(Tensor<T>, f64)> {
    ensure!(batch >= 1, SfeError::config("evaluation batch must be >= 1"));
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch) {
        let (x, _) = plain_batch::<T>(ds, chunk, norm)?;
        parts.push(model.forward_eval(&x, scheme)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let probs = Tensor::concat_rows(&refs)?;
    let acc = accuracy(&probs, &ds.labels)?;
    Ok((probs, acc))
}

pub struct Trainer<T> {
    /// Resolved configuration (normalization materialized).
    pub config: ExperimentConfig,
    pub model: SfeModel<T>,
    pub optimizer: SgdState<T>,
    pub train_set: LabeledImageDataset,
    pub test_set: LabeledImageDataset,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub trace: Vec<StepRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Load the configured dataset and build a fresh model.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.dataset.load()?;
        Self::with_data(config, train, test)
    }

    pub fn with_data(config: ExperimentConfig, train: LabeledImageDataset, test: LabeledImageDataset) -> Result<Self> {
        let config = config.resolve(&train)?;
        ensure!(
            test.shape == train.shape && test.classes == train.classes,
            SfeError::data("train and test splits disagree on image shape or classes")
        );
        let model = SfeModel::build(&config.backbone, &config.plan, config.seeds.model, config.seeds.partition)?;
        let optimizer = SgdState::new(&model.params);
        Ok(Trainer {
            config,
            model,
            optimizer,
            train_set: train,
            test_set: test,
            epoch: 0,
            step: 0,
            trace: Vec::new(),
        })
    }

    /// Continue from a checkpoint, reloading the datasets it was trained on.
    pub fn resume(ck: Checkpoint<T>) -> Result<Self> {
        let (train, test) = ck.config.dataset.load()?;
        Self::resume_with_data(ck, train, test)
    }

    pub fn resume_with_data(ck: Checkpoint<T>, train: LabeledImageDataset, test: LabeledImageDataset) -> Result<Self> {
        ensure!(
            ck.rng == RngState::capture(&augment_rng(ck.config.seeds.data, ck.epoch)),
            SfeError::config("checkpoint RNG state is not at an epoch boundary")
        );
        Ok(Trainer {
            config: ck.config,
            model: ck.model,
            optimizer: ck.optimizer,
            train_set: train,
            test_set: test,
            epoch: ck.epoch,
            step: ck.step,
            trace: Vec::new(),
        })
    }

    pub fn normalization(&self) -> Normalization {
        self.config.normalization()
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_schedule().lr_at_epoch(self.epoch)
    }

    /// Forward, loss, backward and one SGD update on a prepared batch.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepRecord> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.model.forward_training(&mut g, xv)?;
        let terms = total_training_loss(&self.model, &mut g, &out, labels)?;
        let loss = g.value(terms.total).item().as_f64();
        ensure!(
            loss.is_finite(),
            SfeError::numeric(format!("loss became {loss} at step {} (epoch {})", self.step, self.epoch))
        );
        g.backward(terms.total)?;
        self.model.params.zero_grad();
        g.accumulate_param_grads(&mut self.model.params);
        let o = self.config.optimizer;
        sgd_step(&mut self.model.params, &mut self.optimizer, lr, o.momentum, o.weight_decay)?;
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss,
            joint: g.value(terms.joint).item().as_f64(),
            kl: terms.kl.map(|k| g.value(k).item().as_f64()),
        };
        self.step += 1;
        self.trace.push(rec);
        Ok(rec)
    }

    /// One pass over the training split. Returns `(mean loss, steps, ms per step)`.
    pub fn train_epoch(&mut self) -> Result<(f64, usize, f64)> {
        let lr = self.lr();
        let norm = self.normalization();
        let order = epoch_order(self.train_set.len(), self.config.seeds.data, self.epoch);
        let mut rng = augment_rng(self.config.seeds.data, self.epoch);
        let bs = self.config.batch.train;
        // a trailing batch of one sample has no batch variance
        let min = if self.config.backbone.norm == crate::backbone::NormKind::BatchNorm { 2 } else { 1 };
        let mut total = 0.0;
        let mut steps = 0;
        let mut busy = 0.0;
        for chunk in order.chunks(bs).filter(|c| c.len() >= min) {
            let (x, labels) = if self.config.augment {
                make_batch::<T, _>(&self.train_set, chunk, &norm, Some(&mut rng))?
            } else {
                plain_batch::<T>(&self.train_set, chunk, &norm)?
            };
            let t0 = Instant::now();
            let rec = self.train_step(&x, &labels, lr)?;
            busy += t0.elapsed().as_secs_f64() * 1e3;
            total += rec.loss;
            steps += 1;
        }
        ensure!(steps > 0, SfeError::data("training split is smaller than one usable batch"));
        self.epoch += 1;
        Ok((total / steps as f64, steps, busy / steps as f64))
    }

    pub fn evaluate(&self, scheme: InferenceScheme, ds: &LabeledImageDataset) -> Result<f64> {
        evaluate(&self.model, ds, &self.normalization(), scheme, self.config.batch.eval)
    }

    /// Train one epoch and evaluate the test split under every available scheme.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.lr();
        let epoch = self.epoch;
        let (train_loss, _, ms) = self.train_epoch()?;
        let acc_sd = if self.model.supports(InferenceScheme::DistilledInference) {
            Some(self.evaluate(InferenceScheme::DistilledInference, &self.test_set)?)
        } else {
            None
        };
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss,
            acc_si: self.evaluate(InferenceScheme::SingleInference, &self.test_set)?,
            acc_ag: self.evaluate(InferenceScheme::AggregatedInference, &self.test_set)?,
            acc_sd,
            wall_ms_per_iter: ms,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&augment_rng(self.config.seeds.data, self.epoch)),
        }
    }

    /// Train until the schedule's last epoch. With an output directory, the
    /// resolved config, metrics and a checkpoint after every epoch are written.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<EpochRecord>> {
        let paths = out.map(RunPaths::new);
        if let Some(p) = &paths {
            std::fs::create_dir_all(&p.dir).map_err(|e| SfeError::io(&p.dir, e))?;
            std::fs::write(&p.config, self.config.to_toml_string()?).map_err(|e| SfeError::io(&p.config, e))?;
        }
        let mut records = Vec::new();
        while self.epoch < self.config.schedule.epochs {
            let rec = self.run_epoch()?;
            if let Some(p) = &paths {
                append_record(&p.metrics, &rec)?;
                save_checkpoint(&p.checkpoint, &self.checkpoint())?;
            }
            records.push(rec);
        }
        Ok(records)
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
            config: dir.join(CONFIG_FILE),
            metrics: dir.join(METRICS_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
        }
    }
}

#[cfg(test)]
mod tests;
