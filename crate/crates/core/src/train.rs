//! Prediction loss and the mini-batch training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSet;
use crate::error::{shape_err, Error, Result};
use crate::model::{CadModel, ModelConfig, Mode, Variant};
use crate::optim::{AdamState, CosineSchedule};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Mean squared prediction error over the metrics of one timestamp.
pub fn mse_loss<T: Real>(y: &[T], yhat: &[T]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(shape_err("mse_loss", &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(Error::Empty("mse_loss input"));
    }
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub horizon: usize,
    pub experts: usize,
    pub kernels: usize,
    pub epsilon: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub early_stop_patience: Option<usize>,
    /// Chronologically last fraction of windows held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Fit a MinMax scaler on the training series.
    pub normalize: bool,
    /// Clamp scaled test values into `[0, 1]`.
    pub clip_preprocessing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::smd()
    }
}

impl TrainConfig {
    /// Server machine data: already in `[0, 1]`, no rescaling.
    pub fn smd() -> Self {
        Self {
            window: 16,
            horizon: 3,
            experts: 5,
            kernels: 16,
            epsilon: 0.7,
            lr0: 0.001,
            lr_min: 0.0,
            batch: 128,
            max_epochs: 10,
            early_stop_patience: Some(2),
            val_fraction: 0.1,
            seed: 0,
            variant: Variant::Full,
            normalize: false,
            clip_preprocessing: false,
        }
    }

    pub fn swat() -> Self {
        Self {
            window: 32,
            horizon: 1,
            experts: 9,
            normalize: true,
            clip_preprocessing: true,
            ..Self::smd()
        }
    }

    pub fn wadi() -> Self {
        Self {
            experts: 7,
            ..Self::swat()
        }
    }

    pub fn model_config(&self, metrics: usize) -> ModelConfig {
        ModelConfig {
            metrics,
            window: self.window,
            horizon: self.horizon,
            experts: self.experts,
            kernels: self.kernels,
            epsilon: self.epsilon,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch == 0 {
            bad.push("batch must be >= 1");
        }
        if self.max_epochs == 0 {
            bad.push("max_epochs must be >= 1");
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            bad.push("val_fraction must lie in [0, 0.5]");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            bad.push("lr0 must be finite and >= 0");
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            bad.push("lr_min must lie in [0, lr0]");
        }
        if self.early_stop_patience == Some(0) {
            bad.push("early_stop_patience must be >= 1");
        }
        if let Err(Error::Config(msg)) = self.model_config(1).validate() {
            if bad.is_empty() {
                return Err(Error::Config(msg));
            }
            return Err(Error::Config(format!("{}, {msg}", bad.join(", "))));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join(", ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate used by the epoch's last batch.
    pub lr: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch whose parameters the returned model carries.
    pub best_epoch: usize,
}

/// Mean per-sample loss over `indices`, eval mode.
pub fn evaluate_loss<T: Real>(
    model: &CadModel<T>,
    windows: &WindowSet<T>,
    indices: &[usize],
    chunk: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut total = 0.0;
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = windows.batch(part);
        let pred = model.predict(&x)?;
        let s: f64 = pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        total += s / windows.metrics() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// One optimizer step on a batch; returns the batch loss before the update.
pub fn train_step<T: Real>(
    model: &mut CadModel<T>,
    adam: &mut AdamState<T>,
    x: Tensor<T>,
    y: Tensor<T>,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let pred = model.forward_tape(&mut tape, &vars, xv, Mode::Train, rng)?;
    let loss = tape.mse_mean(pred, yv)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {value}")));
    }
    let grads = tape.grad(loss, &vars)?;
    let mut params = model.param_tensors();
    adam.step(&mut params, &grads, lr)?;
    model.set_param_tensors(params)?;
    Ok(value)
}

/// Trains `model` on `windows`. Equivalent to [`train_model_with`] without a
/// clock or progress callback.
pub fn train_model<T: Real>(
    model: CadModel<T>,
    windows: &WindowSet<T>,
    cfg: &TrainConfig,
) -> Result<(CadModel<T>, TrainHistory)> {
    train_model_with(model, windows, cfg, &|| 0.0, &mut |_| {})
}

/// Mini-batch training with Adam under a cosine schedule spanning every
/// batch of every epoch.
///
/// The last `val_fraction` of the windows (in time order) is held out. The
/// rest is reshuffled each epoch from `cfg.seed`. Training stops after
/// `early_stop_patience` consecutive epochs without a strict improvement in
/// validation loss, and the model with the best validation loss is returned.
/// `clock` supplies wall time in seconds and `on_epoch` sees every record as
/// it is produced.
pub fn train_model_with<T: Real>(
    mut model: CadModel<T>,
    windows: &WindowSet<T>,
    cfg: &TrainConfig,
    clock: &dyn Fn() -> f64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(CadModel<T>, TrainHistory)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("window set"));
    }
    let mc = model.config();
    if (mc.metrics, mc.window) != (windows.metrics(), windows.window_len()) {
        return Err(shape_err(
            "model vs windows [K, l]",
            &[mc.metrics, mc.window],
            &[windows.metrics(), windows.window_len()],
        ));
    }

    let n = windows.len();
    let n_val = num_traits::Float::floor(n as f64 * cfg.val_fraction) as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(Error::Empty("training split"));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    let val: Vec<usize> = (n_train..n).collect();

    let per_epoch = n_train.div_ceil(cfg.batch);
    let schedule = CosineSchedule::new(cfg.lr0, cfg.lr_min, (per_epoch * cfg.max_epochs) as u64)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::new(&model.param_tensors());

    let start = clock();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut stale = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            lr = schedule.lr(step)?;
            let (x, y) = windows.batch(chunk);
            let loss = train_step(&mut model, &mut adam, x, y, lr, &mut dropout_rng)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        batch: bi + 1,
                    },
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let v = evaluate_loss(&model, windows, &val, 1024)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: per_epoch,
                });
            }
            Some(v)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_loss,
            lr,
            wall_time_secs: clock() - start,
        };
        on_epoch(&record);
        epochs.push(record);

        if let Some(v) = val_loss {
            match &best {
                Some((b, _, _)) if v >= *b => stale += 1,
                _ => {
                    best = Some((v, epoch, model.param_tensors()));
                    stale = 0;
                }
            }
            if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.set_param_tensors(params)?;
            epoch
        }
        None => epochs.len(),
    };
    Ok((
        model,
        TrainHistory {
            epochs,
            stop_reason,
            best_epoch,
        },
    ))
}
