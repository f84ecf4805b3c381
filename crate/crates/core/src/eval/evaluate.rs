use rayon::prelude::*;

use crate::data::{NormStats, RecordSet, SampleWindow, WindowSet};
use crate::error::{Error, Result};
use crate::eval::metrics::{MetricAccumulator, MetricReport, Scale};
use crate::model::{make_variant, Hsttn};
use crate::tensor::Tensor;
use crate::train::Checkpoint;

fn denormalize(t: &Tensor, norm: &NormStats, channel: usize) -> Tensor {
    t.map(|z| norm.invert(channel, z))
}

/// Loaded checkpoint ready for inference on one normalized record set.
pub struct Forecaster<'a> {
    model: Hsttn,
    checkpoint: &'a Checkpoint,
}

impl<'a> Forecaster<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Result<Self> {
        Ok(Forecaster { model: make_variant(checkpoint.model.clone())?, checkpoint })
    }

    pub fn model(&self) -> &Hsttn {
        &self.model
    }

    /// Fails unless `records` has the shape the checkpoint was trained on.
    pub fn check_records(&self, records: &RecordSet) -> Result<()> {
        let cfg = self.model.config();
        if records.n_turbines() != cfg.n_turbines || records.n_channels() != cfg.n_channels {
            return Err(Error::config(format!(
                "dataset has {} turbines and {} channels, checkpoint expects {} and {}",
                records.n_turbines(),
                records.n_channels(),
                cfg.n_turbines,
                cfg.n_channels
            )));
        }
        Ok(())
    }

    /// Forecast `[N, F, 1]` in native target units from normalized inputs.
    pub fn forecast_at(&self, history: &Tensor, origin: usize, target: usize) -> Result<Tensor> {
        let z = self.model.predict(&self.checkpoint.params, history, origin)?;
        Ok(denormalize(&z, &self.checkpoint.norm, target))
    }

    pub fn forecast(&self, window: &SampleWindow, target: usize) -> Result<Tensor> {
        self.forecast_at(&window.history, window.origin, target)
    }
}

/// Metrics of an arbitrary normalized-space predictor over `windows`, after
/// mapping predictions and targets back to native units.
pub fn evaluate_with<F>(windows: &WindowSet, norm: &NormStats, scale: Scale, predict: F) -> Result<MetricReport>
where
    F: Fn(&SampleWindow) -> Result<Tensor> + Sync,
{
    if windows.is_empty() {
        return Err(Error::Evaluation("no test windows".into()));
    }
    let rs = windows.records();
    if norm.n_channels() != rs.n_channels() {
        return Err(Error::config(format!(
            "{} normalization channels for {} data channels",
            norm.n_channels(),
            rs.n_channels()
        )));
    }
    let target = rs.target_index();
    let blocks = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let w = windows.get(i);
            let y_hat = denormalize(&predict(&w)?, norm, target);
            let y = denormalize(&w.future_target, norm, target);
            Ok((y, y_hat, w.future_validity))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricAccumulator::new(rs.turbine_ids().to_vec());
    for (y, y_hat, mask) in &blocks {
        acc.add(y, y_hat, mask)?;
    }
    acc.finish(scale)
}

/// Runs the checkpointed model over every test window.
pub fn evaluate(checkpoint: &Checkpoint, windows: &WindowSet, scale: Scale) -> Result<MetricReport> {
    let f = Forecaster::new(checkpoint)?;
    f.check_records(windows.records())?;
    let params = &checkpoint.params;
    evaluate_with(windows, &checkpoint.norm, scale, |w| f.model.predict(params, &w.history, w.origin))
}

/// Repeats each turbine's last valid observed target over the horizon
/// (normalized units; 0 when the whole history is invalid).
pub fn persistence_forecast(window: &SampleWindow, target: usize, valid: impl Fn(usize, usize) -> bool) -> Tensor {
    let s = window.history.shape();
    let (n, h) = (s[0], s[1]);
    let f = window.future_target.shape()[1];
    let mut out = Vec::with_capacity(n * f);
    for i in 0..n {
        let last = (0..h)
            .rev()
            .find(|&t| valid(i, t))
            .map_or(0.0, |t| window.history.get(&[i, t, target]));
        out.extend(std::iter::repeat_n(last, f));
    }
    Tensor::new(&[n, f, 1], out).expect("forecast shape")
}

/// Persistence baseline metrics over `windows`.
pub fn evaluate_persistence(windows: &WindowSet, norm: &NormStats, scale: Scale) -> Result<MetricReport> {
    let rs = windows.records();
    let (target, h) = (rs.target_index(), windows.history_len());
    evaluate_with(windows, norm, scale, |w| {
        let start = w.origin - h;
        Ok(persistence_forecast(w, target, |n, t| rs.is_valid(n, start + t)))
    })
}
