//! The optimisation loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Objective, SeparatorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Separator;
use crate::objective::{pit_mse_graph, pit_si_snr_graph};
use crate::scalar::Scalar;
use crate::signals::{MixtureExample, Waveform};
use crate::tensor::Tensor;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::eval::evaluate;
use crate::trainer::optim::{clip_global_norm, Adam};
use crate::trainer::schedule::PlateauSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Mean PIT loss over the batch, before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub valid_si_snri: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub separator: Separator<T>,
    pub optimizer: Adam<T>,
    pub schedule: PlateauSchedule,
    pub config: TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub best_valid_si_snri: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(separator: &SeparatorConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let separator = Separator::new(separator, config.seed)?;
        let optimizer = Adam::new(separator.params(), config.lr);
        Ok(Trainer {
            separator,
            optimizer,
            schedule: PlateauSchedule::new(config.lr, config.lr_decay.clone()),
            config: config.clone(),
            step: 0,
            epoch: 0,
            best_valid_si_snri: None,
        })
    }

    /// Resumes from a checkpoint that carries training state.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let config = ckpt
            .train
            .ok_or_else(|| Error::invalid("checkpoint has no training configuration"))?;
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| Adam::new(ckpt.separator.params(), config.lr));
        let schedule = ckpt
            .schedule
            .unwrap_or_else(|| PlateauSchedule::new(config.lr, config.lr_decay.clone()));
        Ok(Trainer {
            separator: ckpt.separator,
            optimizer,
            schedule,
            config,
            step: ckpt.step,
            epoch: ckpt.epoch,
            best_valid_si_snri: ckpt.best_valid_si_snri,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            separator: self.separator.clone(),
            train: Some(self.config.clone()),
            epoch: self.epoch,
            step: self.step,
            best_valid_si_snri: self.best_valid_si_snri,
            optimizer: Some(self.optimizer.clone()),
            schedule: Some(self.schedule.clone()),
            note: None,
        }
    }

    /// PIT loss node of one example under the configured objective.
    pub fn example_loss(&self, g: &Graph<T>, p: &crate::params::Bound, ex: &MixtureExample) -> Result<Var> {
        let mix = to_scalar::<T>(&ex.mixture);
        let out = self.separator.forward(g, p, &mix)?;
        let refs: Vec<Vec<T>> = ex.sources.iter().map(to_scalar).collect();
        let node = match self.config.objective {
            Objective::SiSnr => pit_si_snr_graph(g, &out.estimates, &refs)?.0,
            Objective::Mse => {
                let frozen = Graph::new();
                let fp = self.separator.params().bind_frozen(&frozen);
                let targets = refs
                    .iter()
                    .map(|r| {
                        let v = self.separator.encode(&frozen, &fp, r)?;
                        Ok(g.constant((*frozen.value(v)).clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                pit_mse_graph(g, &out.masked, &targets)?.0
            }
        };
        Ok(node)
    }

    /// One optimiser step on the mean loss of `batch`.
    pub fn train_step(&mut self, batch: &[MixtureExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let store = self.separator.params();
        let mut total: Vec<Tensor<T>> = store.zeros_like();
        let mut loss = 0.0;
        for ex in batch {
            let g = Graph::new();
            let p = store.bind(&g);
            let node = self.example_loss(&g, &p, ex)?;
            loss += g.scalar(node).as_f64();
            let mut grads = g.backward(node);
            for (acc, grad) in total.iter_mut().zip(p.collect(&mut grads, store)) {
                acc.add_assign(&grad);
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        let inv = T::lit(1.0 / n);
        for t in total.iter_mut() {
            t.scale_in_place(inv);
        }
        let grad_norm = clip_global_norm(&mut total, self.config.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                checkpoint: None,
            });
        }
        self.optimizer.lr = self.schedule.lr;
        self.optimizer.update(self.separator.params_mut(), &total)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
            lr: self.optimizer.lr,
        })
    }

    /// Example order and crops of one epoch; a pure function of (seed, epoch).
    pub fn epoch_batches(&self, epoch: usize, examples: &[MixtureExample]) -> Vec<Vec<MixtureExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let sr = self.separator.config().sample_rate as f64;
        let crop = ((self.config.crop_seconds * sr).round() as usize).max(self.separator.config().window);
        let cropped: Vec<MixtureExample> = order
            .iter()
            .map(|&i| random_crop(&examples[i], crop, &mut rng))
            .collect();
        cropped
            .chunks(self.config.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

fn to_scalar<T: Scalar>(w: &Waveform) -> Vec<T> {
    w.samples().iter().map(|&v| T::lit(v as f64)).collect()
}

/// A window of `len` samples at a random offset; shorter examples are kept whole.
pub fn random_crop(ex: &MixtureExample, len: usize, rng: &mut impl Rng) -> MixtureExample {
    if ex.len() <= len {
        return ex.clone();
    }
    let start = rng.gen_range(0..=ex.len() - len);
    let cut = |w: &Waveform| {
        Waveform::new(w.samples()[start..start + len].to_vec(), w.sample_rate()).expect("crop of a valid waveform")
    };
    MixtureExample {
        mixture: cut(&ex.mixture),
        sources: ex.sources.iter().map(cut).collect(),
        snr_db: ex.snr_db,
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `metrics.log` and `checkpoints/`.
    pub run_dir: Option<PathBuf>,
    /// Stops after this many optimiser steps.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

struct Log {
    file: Option<BufWriter<File>>,
    records: Vec<MetricRecord>,
}

impl Log {
    fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Runs the configured number of epochs, validating after each one.
pub fn train<T: Scalar>(
    trainer: &mut Trainer<T>,
    train_set: &[MixtureExample],
    valid_set: &[MixtureExample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let sources = trainer.separator.config().sources;
    if train_set.iter().chain(valid_set).any(|e| e.num_sources() != sources) {
        return Err(Error::invalid(format!("every example must have {sources} sources")));
    }
    let ckpt_dir = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Log {
        file: match &opts.run_dir {
            Some(d) => Some(BufWriter::new(
                fs::OpenOptions::new().create(true).append(true).open(d.join("metrics.log"))?,
            )),
            None => None,
        },
        records: Vec::new(),
    };
    let mut report = TrainReport {
        records: Vec::new(),
        best_checkpoint: None,
        last_checkpoint: None,
    };
    let budget_left = |t: &Trainer<T>| opts.max_steps.map_or(true, |m| t.step < m);
    while trainer.epoch < trainer.config.epochs && budget_left(trainer) {
        let epoch = trainer.epoch + 1;
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in trainer.epoch_batches(epoch, train_set) {
            if !budget_left(trainer) {
                break;
            }
            match trainer.train_step(&batch) {
                Ok(stats) => {
                    epoch_loss += stats.loss;
                    batches += 1;
                    log.push(MetricRecord {
                        kind: "step".into(),
                        epoch,
                        step: stats.step,
                        loss: Some(stats.loss),
                        lr: stats.lr,
                        grad_norm: Some(stats.grad_norm),
                        valid_si_snri: None,
                    })?;
                }
                Err(Error::Divergence { step, .. }) => {
                    let path = match &ckpt_dir {
                        Some(dir) => {
                            let mut ck = trainer.checkpoint();
                            ck.note = Some(format!("non-finite loss or gradient at step {step}"));
                            let path = dir.join("diverged.ckpt");
                            ck.save(&path)?;
                            Some(path)
                        }
                        None => None,
                    };
                    log.push(MetricRecord {
                        kind: "divergence".into(),
                        epoch,
                        step,
                        loss: None,
                        lr: trainer.schedule.lr,
                        grad_norm: None,
                        valid_si_snri: None,
                    })?;
                    return Err(Error::Divergence { step, checkpoint: path });
                }
                Err(e) => return Err(e),
            }
        }
        trainer.epoch = epoch;
        let valid = evaluate(&trainer.separator, valid_set)?.mean_si_snri;
        let improved = trainer.best_valid_si_snri.map_or(true, |b| valid > b);
        if improved {
            trainer.best_valid_si_snri = Some(valid);
        }
        trainer.schedule.observe(epoch, valid);
        log.push(MetricRecord {
            kind: "epoch".into(),
            epoch,
            step: trainer.step,
            loss: (batches > 0).then(|| epoch_loss / batches as f64),
            lr: trainer.schedule.lr,
            grad_norm: None,
            valid_si_snri: Some(valid),
        })?;
        if let Some(dir) = &ckpt_dir {
            let ck = trainer.checkpoint();
            let last = dir.join("last.ckpt");
            ck.save(&last)?;
            report.last_checkpoint = Some(last);
            if improved {
                let best = dir.join("best.ckpt");
                ck.save(&best)?;
                report.best_checkpoint = Some(best);
            }
        }
    }
    report.records = log.records;
    Ok(report)
}

/// Parses a metrics log written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(format!("metrics log: {e}"))))
        .collect()
}
