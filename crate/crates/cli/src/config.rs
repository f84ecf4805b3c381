//! Run configuration: one flat `key = value` file naming the dataset, the
//! splits, and the model, training and evaluation settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hsttn_core::data::{RecordSet, Splits};
use hsttn_core::eval::Scale;
use hsttn_core::model::{parse_kv, ModelConfig};
use hsttn_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

const MODEL_KEYS: [&str; 17] = [
    "n_turbines",
    "history_len",
    "horizon_len",
    "n_channels",
    "d_model",
    "n_heads",
    "d_k",
    "d_v",
    "pool_factors",
    "layers_encoder",
    "layers_decoder",
    "dropout_rate",
    "use_skip",
    "use_temporal_branch",
    "use_spatial_branch",
    "use_cfb",
    "time_period",
];
const TRAIN_KEYS: [&str; 6] = ["initial_lr", "lr_decay", "batch_size", "max_epochs", "patience", "seed"];
const RUN_KEYS: [&str; 10] = [
    "data",
    "schema",
    "train_end",
    "val_end",
    "train_fraction",
    "val_fraction",
    "train_stride",
    "eval_stride",
    "out",
    "scale",
];

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Boundaries { train_end: usize, val_end: usize },
    Fractions { train: f64, val: f64 },
}

impl SplitSpec {
    pub fn resolve(&self, total: usize) -> CliResult<Splits> {
        Ok(match *self {
            SplitSpec::Boundaries { train_end, val_end } => Splits::new(total, train_end, val_end)?,
            SplitSpec::Fractions { train, val } => Splits::by_fraction(total, train, val)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    /// Not needed for binary caches, which embed their schema.
    pub schema: Option<PathBuf>,
    pub splits: SplitSpec,
    /// Turbine and channel counts are filled in from the dataset.
    pub model: ModelConfig,
    turbines_fixed: bool,
    channels_fixed: bool,
    period_fixed: bool,
    pub train: TrainConfig,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub out: PathBuf,
    pub scale: Scale,
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> CliResult<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|_| CliError::usage(format!("bad value `{raw}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<RunConfig> {
        let map = parse_kv(text)?;
        for key in map.keys() {
            let known = [&MODEL_KEYS[..], &TRAIN_KEYS, &RUN_KEYS].iter().any(|set| set.contains(&key.as_str()));
            if !known {
                return Err(CliError::usage(format!("unknown configuration key `{key}`")));
            }
        }
        let path = |key: &str| map.get(key).map(|p| base.join(p));
        let data = path("data").ok_or_else(|| CliError::usage("configuration lacks `data`"))?;

        let mut model_map = parse_kv(&ModelConfig::reference(1, 1).to_kv())?;
        if map.contains_key("d_model") || map.contains_key("n_heads") {
            model_map.remove("d_k");
            model_map.remove("d_v");
        }
        for key in MODEL_KEYS {
            if let Some(v) = map.get(key) {
                model_map.insert(key.to_string(), v.clone());
            }
        }
        let model = ModelConfig::from_kv(&model_map)?;

        let splits = if map.contains_key("train_end") || map.contains_key("val_end") {
            SplitSpec::Boundaries { train_end: get(&map, "train_end", 0)?, val_end: get(&map, "val_end", 0)? }
        } else {
            SplitSpec::Fractions { train: get(&map, "train_fraction", 0.7)?, val: get(&map, "val_fraction", 0.1)? }
        };
        let scale = match map.get("scale").map(String::as_str) {
            None | Some("native") => Scale::Native,
            Some("mega") => Scale::Mega,
            Some(other) => return Err(CliError::usage(format!("scale must be `native` or `mega`, got `{other}`"))),
        };
        Ok(RunConfig {
            data,
            schema: path("schema"),
            splits,
            model,
            turbines_fixed: map.contains_key("n_turbines"),
            channels_fixed: map.contains_key("n_channels"),
            period_fixed: map.contains_key("time_period"),
            train: TrainConfig::from_kv(&map)?,
            train_stride: get(&map, "train_stride", 1)?,
            eval_stride: get(&map, "eval_stride", 1)?,
            out: path("out").unwrap_or_else(|| base.join("out")),
            scale,
        })
    }

    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read configuration {}: {e}", path.display())))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks every setting that does not depend on the dataset contents.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(CliError::usage("strides must be positive"));
        }
        if !self.data.is_file() {
            return Err(CliError::Io(format!("dataset {} does not exist", self.data.display())));
        }
        match &self.schema {
            Some(s) if !s.is_file() => Err(CliError::Io(format!("schema {} does not exist", s.display()))),
            None if !is_cache(&self.data) => Err(CliError::usage("configuration lacks `schema`")),
            _ => Ok(()),
        }
    }

    /// Model configuration sized for `records`, with the position-encoding
    /// cycle set to one day of records unless configured.
    pub fn model_for(&self, records: &RecordSet) -> CliResult<ModelConfig> {
        let mut cfg = self.model.clone();
        for (fixed, slot, found, what) in [
            (self.turbines_fixed, &mut cfg.n_turbines, records.n_turbines(), "turbines"),
            (self.channels_fixed, &mut cfg.n_channels, records.n_channels(), "channels"),
        ] {
            if fixed && *slot != found {
                return Err(CliError::usage(format!("configuration expects {} {what}, dataset has {found}", *slot)));
            }
            *slot = found;
        }
        if !self.period_fixed {
            cfg.time_period = records.schema().slots_per_day() as usize;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn is_cache(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}
