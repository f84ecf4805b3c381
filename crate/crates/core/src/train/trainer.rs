use std::io::Write;

use log::{debug, info};
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{NormStats, SampleWindow, WindowSet};
use crate::error::{Error, Result};
use crate::model::{Hsttn, ModelParameters};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, AdamState};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::{early_stop, lr_schedule, TrainConfig};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Mean squared error over the positions where `mask` is set.
pub fn mse_loss(y_hat: &Tensor, y: &Tensor, mask: &[bool]) -> Result<f64> {
    let (sse, count) = masked_sse(y_hat, y, mask)?;
    if count == 0 {
        return Err(Error::Loss("no valid positions to score".into()));
    }
    Ok(sse / count as f64)
}

fn masked_sse(y_hat: &Tensor, y: &Tensor, mask: &[bool]) -> Result<(f64, usize)> {
    if y_hat.shape() != y.shape() || mask.len() != y.numel() {
        return Err(Error::shape(format!(
            "loss over prediction {:?}, target {:?}, mask of {}",
            y_hat.shape(),
            y.shape(),
            mask.len()
        )));
    }
    let mut sse = 0.0;
    let mut count = 0;
    for ((p, t), &m) in y_hat.data().iter().zip(y.data()).zip(mask) {
        if m {
            sse += (p - t) * (p - t);
            count += 1;
        }
    }
    Ok((sse, count))
}

/// Pooled masked MSE of `params` over every window, in evaluation mode.
pub fn evaluate_loss(model: &Hsttn, params: &ModelParameters, windows: &WindowSet) -> Result<f64> {
    let parts = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let w = windows.get(i);
            let y_hat = model.predict(params, &w.history, w.origin)?;
            masked_sse(&y_hat, &w.future_target, &w.future_validity)
        })
        .collect::<Result<Vec<_>>>()?;
    let (sse, count) = parts.iter().fold((0.0, 0), |(s, c), &(ps, pc)| (s + ps, c + pc));
    if count == 0 {
        return Err(Error::Loss("no valid positions in the evaluated windows".into()));
    }
    Ok(sse / count as f64)
}

/// Owns parameters and optimizer state; one call to [`Trainer::step`] is one
/// Adam update on one mini-batch.
#[derive(Clone, Debug)]
pub struct Trainer<'m> {
    model: &'m Hsttn,
    params: ModelParameters,
    adam: AdamState,
    dropout: RngStream,
    steps: u64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Hsttn, params: ModelParameters, seed: u64) -> Self {
        let adam = AdamState::new(&params);
        Trainer { model, params, adam, dropout: RngStream::new(seed).derive(DROPOUT_STREAM), steps: 0 }
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forward and backward over `batch` with the loss pooled over every
    /// valid position, then one Adam update. Returns the batch loss before
    /// the update.
    pub fn step(&mut self, batch: &[SampleWindow], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let count: usize = batch.iter().map(SampleWindow::valid_count).sum();
        if count == 0 {
            return Err(Error::Loss("batch has no valid target positions".into()));
        }
        let step_rng = self.dropout.derive(self.steps);
        let model = self.model;
        let params = &self.params;
        let parts = batch
            .par_iter()
            .enumerate()
            .map(|(i, w)| window_gradients(model, params, w, &mut step_rng.derive(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / count as f64;
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        for (sse, g) in &parts {
            total += sse;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b * scale;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} at step {}", self.steps + 1)));
        }
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        self.steps += 1;
        Ok(loss)
    }
}

fn window_gradients(
    model: &Hsttn,
    params: &ModelParameters,
    w: &SampleWindow,
    rng: &mut RngStream,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, &w.history, w.origin, true, rng)?;
    let sse = tape.masked_sse(out.y_hat, &w.future_target, &w.future_validity)?;
    tape.backward(sse)?;
    Ok((tape.value(sse).item(), bound.grads(&tape)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Comma-separated training log with a header row.
pub fn write_log<W: Write>(mut out: W, log: &[EpochLog]) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_loss,lr")?;
    for e in log {
        writeln!(out, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.lr)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Parameters drawn for a fresh run with `config.seed`.
pub fn initial_params(model: &Hsttn, config: &TrainConfig) -> ModelParameters {
    model.init_params(&mut RngStream::new(config.seed).derive(INIT_STREAM))
}

/// Trains from seeded initial parameters; see [`train_from`].
pub fn train(model: &Hsttn, train: &WindowSet, val: &WindowSet, norm: &NormStats, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, initial_params(model, config), train, val, norm, config)
}

/// Epochs of shuffled mini-batches with per-epoch validation, keeping the
/// best checkpoint. Windows without any valid future target are skipped.
pub fn train_from(
    model: &Hsttn,
    init: ModelParameters,
    train: &WindowSet,
    val: &WindowSet,
    norm: &NormStats,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (mut train, mut val) = (train.clone(), val.clone());
    let dropped = train.retain_scorable() + val.retain_scorable();
    if dropped > 0 {
        debug!("skipping {dropped} windows without valid targets");
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} training and {} validation windows",
            train.len(),
            val.len()
        )));
    }
    let cfg = model.config();
    if norm.n_channels() != cfg.n_channels {
        return Err(Error::config(format!(
            "{} normalization channels for a {}-channel model",
            norm.n_channels(),
            cfg.n_channels
        )));
    }

    let init_val = evaluate_loss(model, &init, &val)?;
    let mut best = Checkpoint {
        model: cfg.clone(),
        params: init.clone(),
        epoch: 0,
        val_loss: init_val,
        norm: norm.clone(),
        train: config.clone(),
    };
    let mut history = vec![init_val];
    let mut log = Vec::new();
    let mut trainer = Trainer::new(model, init, config.seed);
    let shuffle = RngStream::new(config.seed).derive(SHUFFLE_STREAM);
    let mut stopped_early = false;
    info!("initial validation loss {init_val:.6}");

    for epoch in 1..=config.max_epochs {
        let lr = lr_schedule(epoch - 1, config);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle.derive(epoch as u64).shuffle(&mut order);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SampleWindow> = chunk.iter().map(|&i| train.get(i)).collect();
            let loss = trainer.step(&batch, lr).map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("epoch {epoch}, batch {}: {msg}", b + 1)),
                other => other,
            })?;
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_loss = evaluate_loss(model, trainer.params(), &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("validation loss diverged in epoch {epoch}")));
        }
        info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.3e}");
        log.push(EpochLog { epoch, train_loss, val_loss, lr });
        if val_loss < best.val_loss {
            best.params = trainer.params().clone();
            best.epoch = epoch;
            best.val_loss = val_loss;
        }
        history.push(val_loss);
        if early_stop(&history, config.patience) {
            stopped_early = true;
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: best, log, stopped_early })
}
