use std::ops::Range;

use crate::data::records::RecordSet;
use crate::error::{Error, Result};

/// Standard deviations below this are treated as constant channels.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn invert(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}

/// Population mean and std of every channel over the valid records in
/// timestamps `train_range`.
pub fn fit_zscore(rs: &RecordSet, train_range: Range<usize>) -> Result<NormStats> {
    if train_range.is_empty() || train_range.end > rs.n_timestamps() {
        return Err(Error::Fit(format!(
            "fit range {train_range:?} is empty or exceeds {} timestamps",
            rs.n_timestamps()
        )));
    }
    let c = rs.n_channels();
    let mut count = 0usize;
    let mut sum = vec![0.0; c];
    for n in 0..rs.n_turbines() {
        for t in train_range.clone() {
            if rs.is_valid(n, t) {
                count += 1;
                for (s, v) in sum.iter_mut().zip(rs.record(n, t)) {
                    *s += v;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Fit(format!("no valid records in fit range {train_range:?}")));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for n in 0..rs.n_turbines() {
        for t in train_range.clone() {
            if rs.is_valid(n, t) {
                for ((s, v), m) in sq.iter_mut().zip(rs.record(n, t)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

/// Normalizes every valid record. Invalid records are zeroed.
pub fn apply_zscore(rs: &RecordSet, stats: &NormStats) -> Result<RecordSet> {
    let c = rs.n_channels();
    if stats.n_channels() != c {
        return Err(Error::shape(format!("{} normalization channels for {c} data channels", stats.n_channels())));
    }
    let mut values = Vec::with_capacity(rs.values().len());
    for (cell, rec) in rs.values().chunks(c).enumerate() {
        if rs.validity()[cell] {
            values.extend(rec.iter().enumerate().map(|(ch, &x)| stats.normalize(ch, x)));
        } else {
            values.extend(std::iter::repeat_n(0.0, c));
        }
    }
    Ok(rs.with_values(values))
}

/// Maps channel-last normalized values back to native units.
pub fn invert_zscore(values: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    let c = stats.n_channels();
    if c == 0 || !values.len().is_multiple_of(c) {
        return Err(Error::shape(format!("{} values are not a multiple of {c} channels", values.len())));
    }
    Ok(values.iter().enumerate().map(|(i, &z)| stats.invert(i % c, z)).collect())
}
