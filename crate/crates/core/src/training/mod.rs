//! End-to-end training on synthetic hazy/clean pairs.

pub mod data;
pub mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{clean_image, smooth_field, stack, synth_haze, Dataset, HazeSpec, Pair, Pattern};
pub use optim::{AdamW, OptState, PlateauScheduler};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::metrics::MetricReport;
use crate::model::{DehazeModel, LutMode, ModelConfig, ModelGrads, Trainable};
use crate::tensor::{Scalar, Tensor};

pub const LUT_GRID_NAME: &str = "lut.grid";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub seed: u64,
    /// Leading epochs during which the purifier CNN is frozen and only the
    /// scatter bias and LUT grid learn.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 100,
            patience: 100,
            factor: 0.5,
            seed: 0,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad lr {} or weight decay {}",
                self.lr, self.weight_decay
            )));
        }
        PlateauScheduler::new(self.lr, self.factor, self.patience).map(|_| ())
    }

    pub fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>6}  {:>10}  {:>10}  {:>10}", "epoch", "train_l1", "val_l1", "lr")?;
        for r in &self.epochs {
            write!(f, "\n{:>6}  {:>10.6}  {:>10.6}  {:>10.3e}", r.epoch, r.train_l1, r.val_l1, r.lr)?;
        }
        Ok(())
    }
}

pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation loss.
    pub best: DehazeModel<T>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Parameters after the last epoch.
    pub last: DehazeModel<T>,
    pub opt_state: OptState<T>,
    pub scheduler: PlateauScheduler,
    pub history: History,
}

/// Small end-to-end setup that trains in minutes on one CPU core:
/// 16 training and 8 validation pairs of 32x32.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyPreset {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub haze: HazeSpec,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub size: usize,
    pub data_seed: u64,
}

impl Default for ToyPreset {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                width: 8,
                lut_size: 5,
                lut_mode: LutMode::Learnable,
                c_max: 1.0,
                flow: FlowConfig::default(),
            },
            train: TrainConfig {
                lr: 1e-2,
                batch_size: 4,
                epochs: 150,
                warmup_epochs: 50,
                ..TrainConfig::default()
            },
            haze: HazeSpec::default(),
            train_pairs: 16,
            val_pairs: 8,
            size: 32,
            data_seed: 1,
        }
    }
}

impl ToyPreset {
    pub fn datasets<T: Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        let (s, seed) = (self.size, self.data_seed);
        Ok((
            Dataset::synthetic(self.train_pairs, s, s, self.haze, seed)?,
            Dataset::synthetic(self.val_pairs, s, s, self.haze, seed.wrapping_add(1))?,
        ))
    }
}

/// Trainable parameters in optimizer order: purifier tensors, then the grid.
pub fn param_shapes<T: Scalar>(model: &DehazeModel<T>) -> Vec<[usize; 4]> {
    let mut shapes = Vec::new();
    model.net.weights.for_each(|_, t| shapes.push(t.shape()));
    shapes.push(model.lut.grid.shape());
    shapes
}

/// Applies one optimizer update with the gradients of one batch.
pub fn apply_update<T: Scalar>(model: &mut DehazeModel<T>, grads: &ModelGrads<T>, opt: &AdamW, state: &mut OptState<T>) -> Result<()> {
    let mut gs: Vec<Option<&Tensor<T>>> = Vec::new();
    grads.net.for_each(|_, g| gs.push(g.as_ref()));
    gs.push(grads.grid.as_ref());
    let mut ps: Vec<&mut Tensor<T>> = Vec::new();
    let DehazeModel { net, lut, .. } = model;
    net.weights.for_each_mut(|_, t| ps.push(t));
    ps.push(&mut lut.grid);
    opt.step(&mut ps, &gs, state)
}

/// Mean loss over a dataset, evaluated in batches.
pub fn evaluate<T: Scalar>(model: &DehazeModel<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (h, c) = data.batch(chunk)?;
        total += model.loss(&h, &c)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Metrics of the clamped outputs and of the untouched hazy inputs, both
/// against the clean references.
pub fn score<T: Scalar>(model: &DehazeModel<T>, data: &Dataset<T>) -> Result<(MetricReport, MetricReport)> {
    let (mut out, mut input) = (MetricReport::default(), MetricReport::default());
    for (i, p) in data.pairs.iter().enumerate() {
        let name = format!("pair_{i:03}");
        out.push(name.clone(), &model.dehaze(&p.hazy)?, &p.clean)?;
        input.push(name, &p.hazy, &p.clean)?;
    }
    Ok((out, input))
}

/// Minibatch AdamW with reduce-on-plateau, keeping the best validation
/// model. `on_epoch` sees every history row as it is produced.
pub fn train<T: Scalar>(
    model: DehazeModel<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let full: Trainable = model.trainable();
    let mut state = OptState::for_shapes(param_shapes(&model));
    let mut scheduler = PlateauScheduler::new(cfg.lr, cfg.factor, cfg.patience)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut current = model;
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = History::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr;
        let trainable = Trainable {
            cnn: full.cnn && epoch > cfg.warmup_epochs,
            ..full
        };
        let opt = cfg.optimizer(lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let (hazy, clean) = train_set.batch(chunk)?;
            let (loss, grads) = current.loss_and_grads(&hazy, &clean, trainable).map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { context: "training", step },
                other => other,
            })?;
            total += loss * chunk.len() as f64;
            apply_update(&mut current, &grads, &opt, &mut state)?;
            if !current.lut.grid.all_finite() || !params_finite(&current) {
                return Err(Error::Divergence { context: "training", step });
            }
        }
        let train_l1 = total / train_set.len() as f64;
        let val_l1 = evaluate(&current, val_set, cfg.batch_size).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence {
                context: "validation",
                step,
            },
            other => other,
        })?;
        if !val_l1.is_finite() {
            return Err(Error::Divergence {
                context: "validation",
                step,
            });
        }
        if val_l1 < best_val {
            best_val = val_l1;
            best_epoch = epoch;
            best = current.clone();
        }
        let record = EpochRecord {
            epoch,
            train_l1,
            val_l1,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        scheduler.observe(val_l1);
    }
    if cfg.epochs == 0 {
        best_val = evaluate(&current, val_set, cfg.batch_size)?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        last: current,
        opt_state: state,
        scheduler,
        history,
    })
}

fn params_finite<T: Scalar>(model: &DehazeModel<T>) -> bool {
    let mut ok = true;
    model.net.weights.for_each(|_, t| ok &= t.all_finite());
    ok
}
