use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{kv_parse, kv_parse_or};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    /// Full-farm windows per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { initial_lr: 1e-3, lr_decay: 0.7, batch_size: 4, max_epochs: 20, patience: 5, seed: 0 }
    }
}

impl TrainConfig {
    /// Settings used for the full SDWPF farm.
    pub fn sdwpf() -> Self {
        TrainConfig { initial_lr: 1e-4, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.initial_lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "initial_lr = {:?}", self.initial_lr);
        let _ = writeln!(s, "lr_decay = {:?}", self.lr_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Missing keys fall back to the defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            initial_lr: kv_parse_or(map, "initial_lr", d.initial_lr)?,
            lr_decay: kv_parse_or(map, "lr_decay", d.lr_decay)?,
            batch_size: kv_parse_or(map, "batch_size", d.batch_size)?,
            max_epochs: kv_parse_or(map, "max_epochs", d.max_epochs)?,
            patience: kv_parse_or(map, "patience", d.patience)?,
            seed: kv_parse_or(map, "seed", d.seed)?,
        })
    }

    pub(crate) fn from_kv_strict(map: &BTreeMap<String, String>) -> Result<Self> {
        Ok(TrainConfig {
            initial_lr: kv_parse(map, "initial_lr")?,
            lr_decay: kv_parse(map, "lr_decay")?,
            batch_size: kv_parse(map, "batch_size")?,
            max_epochs: kv_parse(map, "max_epochs")?,
            patience: kv_parse(map, "patience")?,
            seed: kv_parse(map, "seed")?,
        })
    }
}

/// `initial_lr · lr_decay^epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.initial_lr * config.lr_decay.powi(epoch as i32)
}

/// True once the best (first minimal) loss is `patience` or more epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(mut best) = history.first().copied() else {
        return false;
    };
    let mut best_at = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v < best {
            best = v;
            best_at = i;
        }
    }
    history.len() - 1 - best_at >= patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_kv;

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0, &TrainConfig::sdwpf()), 1e-4);
        let half = TrainConfig { initial_lr: 1e-4, lr_decay: 0.5, ..TrainConfig::default() };
        assert_eq!(lr_schedule(1, &half), 5e-5);
        let flat = TrainConfig { lr_decay: 1.0, ..TrainConfig::default() };
        assert!((0..10).all(|e| lr_schedule(e, &flat) == flat.initial_lr));
    }

    #[test]
    fn stopping_rule() {
        assert!(!early_stop(&[5.0, 4.0, 3.0, 2.0, 1.0], 1));
        assert!(!early_stop(&[3.0, 2.0, 2.0], 2));
        assert!(early_stop(&[3.0, 2.0, 2.0, 2.0], 2));
        assert!(!early_stop(&[7.0], 1));
        assert!(!early_stop(&[], 1));
        assert!(early_stop(&[1.0, 2.0], 1));
    }

    #[test]
    fn validation_and_kv() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { initial_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        let c = TrainConfig { initial_lr: 3e-4, seed: 9, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_kv_strict(&parse_kv(&c.to_kv()).unwrap()).unwrap(), c);
        assert_eq!(TrainConfig::from_kv(&parse_kv("seed = 2").unwrap()).unwrap().seed, 2);
    }
}
