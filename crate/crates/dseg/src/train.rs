//! Epoch loop: seeded shuffling, forward / composite loss / backward / Adam,
//! validation dice after every epoch, best-epoch parameter selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{dice_metric, total_loss};
use crate::model::{Model, ModelError};
use crate::optim::{lr_at_epoch, Adam, OptimError};
use crate::tensor::{Ctx, Elem, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("train config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Every optimization hyperparameter, with the published defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_dice: f64,
    pub lambda_bce: f64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_gamma: f64,
    pub lr_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dice_smooth: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_dice: 1.25,
            lambda_bce: 0.95,
            lr0: 1e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_gamma: 0.9,
            lr_step: 10,
            epochs: 150,
            batch_size: 1,
            dice_smooth: 1.0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_dice <= 0.0 || self.lambda_bce <= 0.0 {
            return Err(TrainError::Config("loss weights must be positive".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(TrainError::Config("need 0 < beta1 < beta2 < 1".into()));
        }
        if !(0.0 < self.lr_gamma && self.lr_gamma <= 1.0) {
            return Err(TrainError::Config("lr_gamma must be in (0,1]".into()));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(TrainError::Config("threshold must be in (0,1)".into()));
        }
        if self.lr_step == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("lr_step and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One (image, mask) training pair, each 1,1,H,W.
pub struct Sample<T: Elem> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Per-epoch record consumed by the CLI's CSV logger.
#[derive(Debug, Clone, Copy)]
pub struct EpochEvent {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub final_train_loss: f64,
    pub optimizer_steps: u64,
}

fn stack_batch<T: Elem>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let shape = samples[0].image.shape();
    let (h, w) = (shape[2], shape[3]);
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != shape || s.mask.shape() != shape {
            return Err(TrainError::Config("all samples in a batch must share one shape".into()));
        }
        images.extend_from_slice(&s.image.data());
        masks.extend_from_slice(&s.mask.data());
    }
    let n = samples.len();
    Ok((
        Tensor::from_vec(&[n, 1, h, w], images)?,
        Tensor::from_vec(&[n, 1, h, w], masks)?,
    ))
}

/// Train `model` for `cfg.epochs` epochs. After each epoch the validation
/// dice is computed in eval mode and an [`EpochEvent`] is passed to `sink`;
/// a `false` return stops training early. The parameters from the best
/// validation-dice epoch are restored before returning.
pub fn fit<T: Elem>(
    model: &Model<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    mut sink: impl FnMut(&EpochEvent) -> bool,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train set".into()));
    }
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let snapshot = |m: &Model<T>| -> Vec<Vec<T>> { m.params.iter().map(|(_, t, _)| t.to_vec()).collect() };
    let mut best: Option<(usize, f64, Vec<Vec<T>>)> = None;
    let mut final_train_loss = 0.0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.lr0, cfg.lr_gamma, cfg.lr_step);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch(&samples)?;
            let tape = Tape::new();
            let ctx = Ctx::train(&tape);
            let pred = model.forward(&ctx, &images)?;
            let loss = total_loss(&ctx, &pred, &masks, cfg.lambda_dice, cfg.lambda_bce, cfg.dice_smooth)?;
            let loss_val = loss.item().to_f64().unwrap();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            model.params.zero_grads();
            tape.backward(&loss)?;
            adam.step(&model.params, lr)?;
            epoch_loss += loss_val;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        final_train_loss = train_loss;
        epochs_run = epoch + 1;

        let val_dsc = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(model, val_set, cfg.threshold)?.0
        };
        if !val_set.is_empty() && best.as_ref().map_or(true, |(_, b, _)| val_dsc > *b) {
            best = Some((epoch, val_dsc, snapshot(model)));
        }
        let event = EpochEvent { epoch, lr, train_loss, val_dsc };
        if !sink(&event) {
            break;
        }
    }

    let (best_epoch, best_val_dsc) = match best {
        Some((e, d, data)) => {
            for ((_, t, _), saved) in model.params.iter().zip(&data) {
                t.set_data(saved);
            }
            (e, d)
        }
        None => (epochs_run.saturating_sub(1), f64::NAN),
    };
    Ok(TrainReport {
        epochs_run,
        best_epoch,
        best_val_dsc,
        final_train_loss,
        optimizer_steps: adam.step_count(),
    })
}

/// Mean and per-sample dice over a dataset, in eval mode.
pub fn evaluate<T: Elem>(
    model: &Model<T>,
    dataset: &[Sample<T>],
    threshold: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset("evaluation set".into()));
    }
    let ctx = Ctx::eval();
    let mut scores = Vec::with_capacity(dataset.len());
    for s in dataset {
        let pred = model.forward(&ctx, &s.image)?;
        scores.push(dice_metric(&pred.data(), &s.mask.data(), threshold));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}
