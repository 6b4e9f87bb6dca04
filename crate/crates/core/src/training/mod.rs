//! Mini-batch training with Adam, linear warmup, best-validation selection,
//! checkpointing, and a per-epoch CSV log.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, BestSnapshot, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{adam_step, lr_schedule, warmup_steps, AdamConfig};

use crate::compute::{Graph, ModelParams};
use crate::data::{batch_iter, date_batches, Dataset, WindowSample};
use crate::error::{MsgcaError, Result};
use crate::evaluation::{accuracy, mcc, ConfusionMatrix};
use crate::model::{batch_loss, init_params, predict_with, Batch, Model, ModelConfig};

/// Floating-point width of the computation. Only 64-bit is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
}

/// How training samples are grouped into batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchOrder {
    /// Shuffled label dates, samples of one date kept together. Keeps the
    /// set of graph nodes per batch small.
    #[default]
    ByDate,
    /// Uniformly shuffled samples.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of all optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub batch_order: BatchOrder,
    pub adam: AdamConfig,
    /// Windows per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            warmup_frac: 0.1,
            seed: 0,
            precision: Precision::F64,
            grad_clip: None,
            batch_order: BatchOrder::ByDate,
            adam: AdamConfig::default(),
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(MsgcaError::Config("batch sizes must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(MsgcaError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) {
            return Err(MsgcaError::Config(format!(
                "warmup_frac must lie in [0, 0.5], got {}",
                self.warmup_frac
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(MsgcaError::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_acc: f64,
    pub valid_mcc: f64,
    pub seconds: f64,
    pub peak_mem_bytes: u64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,valid_acc,valid_mcc,seconds,peak_mem_bytes";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{}",
            self.epoch,
            self.train_loss,
            self.valid_acc,
            self.valid_mcc,
            self.seconds,
            self.peak_mem_bytes
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.ckpt`, rewritten after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV log, appended one line per epoch.
    pub history_csv: Option<PathBuf>,
    /// Stop after this many completed epochs (the schedule still assumes
    /// the configured total, so a later resume continues seamlessly).
    pub stop_after_epoch: Option<usize>,
}

pub struct TrainOutcome {
    /// Model with the best-validation weights.
    pub model: Model,
    /// Final training state, suitable for resuming.
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.checkpoint.history
    }
}

/// Confusion matrix of `params` on `samples`.
pub fn confusion(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &Dataset,
    samples: &[WindowSample],
    chunk: usize,
) -> Result<ConfusionMatrix> {
    let pred = predict_with(params, cfg, &dataset.panel, &dataset.graph, samples, chunk)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    ConfusionMatrix::from_predictions(3, &truth, &pred)
}

fn epoch_batches(samples: &[WindowSample], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    // stream 0 of the master seed initialises weights; epochs use 1, 2, ...
    match cfg.batch_order {
        BatchOrder::Shuffled => batch_iter(samples.len(), cfg.batch_size, cfg.seed, epoch as u64),
        BatchOrder::ByDate => {
            let cals: Vec<usize> = samples.iter().map(|s| s.label_cal).collect();
            date_batches(&cals, cfg.batch_size, cfg.seed, epoch as u64)
        }
    }
}

pub fn train_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(dataset, cfg, &TrainOptions::default(), None)
}

/// Runs (or resumes) training. The returned model carries the weights of
/// the epoch with the highest validation MCC.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    options: &TrainOptions,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = &dataset.split;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(MsgcaError::Data(
            "training needs non-empty train and valid splits".into(),
        ));
    }
    let mut state = match resume {
        Some(c) => {
            if &c.config != cfg {
                return Err(MsgcaError::Config(
                    "checkpoint was written with a different training configuration".into(),
                ));
            }
            c
        }
        None => Checkpoint {
            config: cfg.clone(),
            epoch: 0,
            step: 0,
            params: init_params(&cfg.model, cfg.seed)?,
            best: None,
            history: Vec::new(),
        },
    };
    let batches_per_epoch = split.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;
    let last_epoch = options
        .stop_after_epoch
        .map_or(cfg.epochs, |s| s.min(cfg.epochs));
    if let Some(path) = &options.history_csv {
        if !path.exists() {
            std::fs::write(path, format!("{HISTORY_HEADER}\n"))
                .map_err(|e| MsgcaError::io(path, e))?;
        }
    }

    while state.epoch < last_epoch {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        crate::mem::reset_peak();
        let mut loss_sum = 0.0;
        let batches = epoch_batches(&split.train, cfg, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &split.train[i]).collect();
            let batch = Batch::build(&dataset.panel, &dataset.graph, &refs, &cfg.model)?;
            let mut g = Graph::new();
            let vars = state.params.bind(&mut g, true);
            let (loss, _) = batch_loss(&mut g, &vars, &cfg.model, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                let norms: Vec<String> = state
                    .params
                    .value_norms()
                    .into_iter()
                    .map(|(n, v)| format!("{n}={v:.4e}"))
                    .collect();
                return Err(MsgcaError::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {b}; parameter norms: {}",
                    norms.join(", ")
                )));
            }
            g.backward(loss)?;
            state.params.collect_grads(&g, &vars);
            if let Some(c) = cfg.grad_clip {
                state.params.clip_grad_norm(c);
            }
            state.step += 1;
            let lr = lr_schedule(cfg.lr, state.step, total_steps, cfg.warmup_frac);
            adam_step(&mut state.params, lr, &cfg.adam, state.step);
            loss_sum += value;
        }
        state.params.zero_grad();
        let cm = confusion(
            &state.params,
            &cfg.model,
            dataset,
            &split.valid,
            cfg.eval_batch,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            valid_acc: accuracy(&cm)?,
            valid_mcc: mcc(&cm),
            seconds: started.elapsed().as_secs_f64(),
            peak_mem_bytes: crate::mem::peak_bytes() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} valid acc {:.4} mcc {:.4} ({:.2}s)",
            record.train_loss,
            record.valid_acc,
            record.valid_mcc,
            record.seconds
        );
        if state
            .best
            .as_ref()
            .is_none_or(|b| record.valid_mcc > b.valid_mcc)
        {
            state.best = Some(BestSnapshot {
                epoch,
                valid_mcc: record.valid_mcc,
                values: state.params.iter().map(|p| p.values().clone()).collect(),
            });
        }
        if let Some(path) = &options.history_csv {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| MsgcaError::io(path, e))?;
            writeln!(f, "{}", record.csv_line()).map_err(|e| MsgcaError::io(path, e))?;
        }
        state.history.push(record);
        state.epoch = epoch;
        if let Some(dir) = &options.checkpoint_dir {
            save_checkpoint(dir.join("checkpoint.ckpt"), &state)?;
        }
    }

    let model = Model {
        config: cfg.model.clone(),
        params: state.best_params(),
    };
    Ok(TrainOutcome {
        model,
        checkpoint: state,
    })
}
