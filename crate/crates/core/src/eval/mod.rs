//! Farm-level masked MAE / RMSE and model evaluation in native units.

mod evaluate;
mod metrics;

pub use evaluate::{evaluate, evaluate_persistence, evaluate_with, persistence_forecast, Forecaster};
pub use metrics::{masked_mae, masked_rmse, MetricAccumulator, MetricReport, Scale, TurbineMetric};

#[cfg(test)]
mod tests;
