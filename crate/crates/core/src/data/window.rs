use std::ops::Range;

use crate::data::records::RecordSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training or evaluation sample covering every turbine.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[N, H, C]`
    pub history: Tensor,
    /// `[N, F, 1]`
    pub future_target: Tensor,
    /// `N × F`, turbine-major.
    pub future_validity: Vec<bool>,
    /// Timestamp index of the first future step.
    pub origin: usize,
}

impl SampleWindow {
    pub fn valid_count(&self) -> usize {
        self.future_validity.iter().filter(|&&v| v).count()
    }
}

/// `floor((len − H − F) / stride) + 1`.
pub fn window_count(len: usize, history: usize, horizon: usize, stride: usize) -> Result<usize> {
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config(format!(
            "history {history}, horizon {horizon} and stride {stride} must be positive"
        )));
    }
    if len < history + horizon {
        return Err(Error::EmptyDataset(format!(
            "{len} timestamps cannot hold {history} history and {horizon} horizon steps"
        )));
    }
    Ok((len - history - horizon) / stride + 1)
}

/// Windows drawn from one timestamp range of a record set, materialized
/// on demand.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    records: &'a RecordSet,
    history: usize,
    horizon: usize,
    origins: Vec<usize>,
}

impl<'a> WindowSet<'a> {
    /// Windows lying entirely inside `range`; the i-th starts at
    /// `range.start + i·stride`.
    pub fn new(records: &'a RecordSet, range: Range<usize>, history: usize, horizon: usize, stride: usize) -> Result<Self> {
        if range.end > records.n_timestamps() || range.start > range.end {
            return Err(Error::config(format!(
                "range {range:?} outside {} timestamps",
                records.n_timestamps()
            )));
        }
        let count = window_count(range.len(), history, horizon, stride)?;
        let origins = (0..count).map(|i| range.start + i * stride + history).collect();
        Ok(WindowSet { records, history, horizon, origins })
    }

    pub fn records(&self) -> &'a RecordSet {
        self.records
    }

    pub fn history_len(&self) -> usize {
        self.history
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// Drops windows whose future holds no valid target.
    pub fn retain_scorable(&mut self) -> usize {
        let before = self.origins.len();
        let (rs, f) = (self.records, self.horizon);
        self.origins
            .retain(|&o| (0..rs.n_turbines()).any(|n| (o..o + f).any(|t| rs.is_valid(n, t))));
        before - self.origins.len()
    }

    pub fn get(&self, i: usize) -> SampleWindow {
        window_at(self.records, self.origins[i], self.history, self.horizon)
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleWindow> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

/// `[N, H, C]` inputs for a forecast starting at `origin`.
pub fn history_at(rs: &RecordSet, origin: usize, history: usize) -> Result<Tensor> {
    if origin < history || origin > rs.n_timestamps() {
        return Err(Error::Contract(format!(
            "origin {origin} needs {history} history steps within {} timestamps",
            rs.n_timestamps()
        )));
    }
    let (n, c) = (rs.n_turbines(), rs.n_channels());
    let mut data = Vec::with_capacity(n * history * c);
    for turbine in 0..n {
        for t in origin - history..origin {
            data.extend_from_slice(rs.record(turbine, t));
        }
    }
    Tensor::new(&[n, history, c], data)
}

/// The window whose future starts at `origin`. Panics if it does not fit.
pub fn window_at(rs: &RecordSet, origin: usize, history: usize, horizon: usize) -> SampleWindow {
    assert!(origin >= history && origin + horizon <= rs.n_timestamps(), "window out of range");
    let n = rs.n_turbines();
    let target = rs.target_index();
    let mut fut = Vec::with_capacity(n * horizon);
    let mut valid = Vec::with_capacity(n * horizon);
    for turbine in 0..n {
        for t in origin..origin + horizon {
            fut.push(rs.value(turbine, t, target));
            valid.push(rs.is_valid(turbine, t));
        }
    }
    SampleWindow {
        history: history_at(rs, origin, history).expect("history in range"),
        future_target: Tensor::new(&[n, horizon, 1], fut).expect("target shape"),
        future_validity: valid,
        origin,
    }
}

/// All windows over the full timeline.
pub fn make_windows(rs: &RecordSet, history: usize, horizon: usize, stride: usize) -> Result<Vec<SampleWindow>> {
    Ok(WindowSet::new(rs, 0..rs.n_timestamps(), history, horizon, stride)?.iter().collect())
}

/// Chronological, disjoint train / validation / test timestamp ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// `[0, train_end)`, `[train_end, val_end)`, `[val_end, total)`.
    pub fn new(total: usize, train_end: usize, val_end: usize) -> Result<Splits> {
        if !(0 < train_end && train_end < val_end && val_end < total) {
            return Err(Error::config(format!(
                "split boundaries {train_end}, {val_end} must satisfy 0 < train < val < {total}"
            )));
        }
        Ok(Splits { train: 0..train_end, val: train_end..val_end, test: val_end..total })
    }

    /// Boundaries at the given fractions of the timeline (rounded down).
    pub fn by_fraction(total: usize, train: f64, val: f64) -> Result<Splits> {
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return Err(Error::config(format!("split fractions {train}, {val} must be positive and sum below 1")));
        }
        let a = (total as f64 * train) as usize;
        let b = (total as f64 * (train + val)) as usize;
        Splits::new(total, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::Schema;

    fn ramp(n: usize, t: usize) -> RecordSet {
        let schema = Schema::with_channels(vec!["a".into(), "Patv".into()], "Patv");
        let values = (0..n * t).flat_map(|i| [i as f64, 100.0 + i as f64]).collect();
        RecordSet::from_parts(schema, (0..n).map(|i| i.to_string()).collect(), 0, t, values, vec![true; n * t]).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(window_count(300, 144, 144, 1).unwrap(), 13);
        assert_eq!(window_count(288, 144, 144, 1).unwrap(), 1);
        assert_eq!(window_count(300, 144, 144, 300).unwrap(), 1);
        assert!(matches!(window_count(287, 144, 144, 1), Err(Error::EmptyDataset(_))));
        assert!(window_count(300, 144, 144, 0).is_err());
    }

    #[test]
    fn window_contents_are_contiguous() {
        let rs = ramp(2, 10);
        let ws = make_windows(&rs, 3, 2, 2).unwrap();
        assert_eq!(ws.len(), 3);
        let w = &ws[1];
        assert_eq!(w.origin, 5);
        assert_eq!(w.history.shape(), &[2, 3, 2]);
        assert_eq!(w.history.get(&[0, 0, 0]), 2.0);
        assert_eq!(w.history.get(&[1, 2, 0]), 14.0);
        assert_eq!(w.future_target.data(), &[105.0, 106.0, 115.0, 116.0]);
    }

    #[test]
    fn windows_stay_inside_their_range() {
        let rs = ramp(1, 40);
        let splits = Splits::new(40, 20, 30).unwrap();
        let val = WindowSet::new(&rs, splits.val.clone(), 4, 3, 1).unwrap();
        assert_eq!(val.len(), 4);
        assert_eq!(val.origins().first(), Some(&24));
        assert!(val.origins().iter().all(|&o| o - 4 >= 20 && o + 3 <= 30));
    }

    #[test]
    fn unscorable_windows_are_dropped() {
        let mut rs = ramp(1, 8);
        for t in 4..6 {
            rs.validity_mut()[t] = false;
        }
        let mut ws = WindowSet::new(&rs, 0..8, 2, 2, 1).unwrap();
        assert_eq!(ws.retain_scorable(), 1);
        assert!(!ws.origins().contains(&4));
    }

    #[test]
    fn splits_are_ordered() {
        let s = Splits::by_fraction(100, 0.7, 0.1).unwrap();
        assert_eq!((s.train.end, s.val.end, s.test.end), (70, 80, 100));
        assert!(Splits::new(10, 5, 5).is_err());
        assert!(Splits::by_fraction(10, 0.9, 0.2).is_err());
    }
}
