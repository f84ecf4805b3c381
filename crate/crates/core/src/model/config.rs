use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture description. Every parameter shape follows from it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_turbines: usize,
    pub history_len: usize,
    pub horizon_len: usize,
    pub n_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Downsampling ratio between consecutive temporal scales. Empty means a
    /// single-scale model.
    pub pool_factors: Vec<usize>,
    pub layers_encoder: usize,
    pub layers_decoder: usize,
    pub dropout_rate: f64,
    pub use_skip: bool,
    pub use_temporal_branch: bool,
    pub use_spatial_branch: bool,
    pub use_cfb: bool,
    /// Timestamps per cycle of the position encoding, one day of records.
    pub time_period: usize,
}

/// Structural variants used in the ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Hsttn,
    Sttn,
    TwoScale,
    FourScale,
    NoSkip,
    TemporalOnly,
    SpatialOnly,
    NoFusion,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Hsttn,
        Variant::Sttn,
        Variant::TwoScale,
        Variant::FourScale,
        Variant::NoSkip,
        Variant::TemporalOnly,
        Variant::SpatialOnly,
        Variant::NoFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hsttn => "HSTTN",
            Variant::Sttn => "STTN",
            Variant::TwoScale => "2-STTN",
            Variant::FourScale => "4-STTN",
            Variant::NoSkip => "NoSkip",
            Variant::TemporalOnly => "T-Only",
            Variant::SpatialOnly => "S-Only",
            Variant::NoFusion => "ST-Only",
        }
    }

    /// Rewrites the structural fields of `base`; sizes are kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.pool_factors = vec![3, 2];
        c.use_skip = true;
        c.use_temporal_branch = true;
        c.use_spatial_branch = true;
        c.use_cfb = true;
        match self {
            Variant::Hsttn => {}
            Variant::Sttn => c.pool_factors.clear(),
            Variant::TwoScale => c.pool_factors = vec![3],
            Variant::FourScale => c.pool_factors = vec![3, 2, 2],
            Variant::NoSkip => c.use_skip = false,
            Variant::TemporalOnly => c.use_spatial_branch = false,
            Variant::SpatialOnly => c.use_temporal_branch = false,
            Variant::NoFusion => c.use_cfb = false,
        }
        c
    }
}

impl ModelConfig {
    /// The 144-in/144-out reference setup: width 16, two heads, pooling by 3 then 2.
    pub fn reference(n_turbines: usize, n_channels: usize) -> Self {
        ModelConfig {
            n_turbines,
            history_len: 144,
            horizon_len: 144,
            n_channels,
            d_model: 16,
            n_heads: 2,
            d_k: 8,
            d_v: 8,
            pool_factors: vec![3, 2],
            layers_encoder: 1,
            layers_decoder: 1,
            dropout_rate: 0.1,
            use_skip: true,
            use_temporal_branch: true,
            use_spatial_branch: true,
            use_cfb: true,
            time_period: 144,
        }
    }

    /// Temporal scales, finest first.
    pub fn n_scales(&self) -> usize {
        self.pool_factors.len() + 1
    }

    /// Sequence length at each scale for a sequence of `len` steps.
    pub fn scale_lengths(&self, len: usize) -> Vec<usize> {
        let mut out = vec![len];
        for p in &self.pool_factors {
            out.push(out.last().unwrap() / p);
        }
        out
    }

    pub fn total_pool(&self) -> usize {
        self.pool_factors.iter().product()
    }

    /// CFB runs only when both branches exist.
    pub fn fuses(&self) -> bool {
        self.use_cfb && self.use_temporal_branch && self.use_spatial_branch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_turbines", self.n_turbines),
            ("history_len", self.history_len),
            ("horizon_len", self.horizon_len),
            ("n_channels", self.n_channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("layers_encoder", self.layers_encoder),
            ("layers_decoder", self.layers_decoder),
            ("time_period", self.time_period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.pool_factors.contains(&0) {
            return Err(Error::config("pooling factors must be positive"));
        }
        if self.history_len != self.horizon_len {
            return Err(Error::config(format!(
                "history length {} and horizon length {} must match for the encoder/decoder concat",
                self.history_len, self.horizon_len
            )));
        }
        let mut prefix = 1;
        for &p in &self.pool_factors {
            prefix *= p;
            for (name, len) in [("history_len", self.history_len), ("horizon_len", self.horizon_len)] {
                if len % prefix != 0 {
                    return Err(Error::config(format!(
                        "{name} {len} is not divisible by pooling product {prefix}"
                    )));
                }
            }
        }
        if !self.use_temporal_branch && !self.use_spatial_branch {
            return Err(Error::config("at least one of the temporal and spatial branches must be enabled"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Flat `key = value` rendering, also used as the checkpoint header.
    pub fn to_kv(&self) -> String {
        let factors: Vec<String> = self.pool_factors.iter().map(|p| p.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "n_turbines = {}", self.n_turbines);
        let _ = writeln!(s, "history_len = {}", self.history_len);
        let _ = writeln!(s, "horizon_len = {}", self.horizon_len);
        let _ = writeln!(s, "n_channels = {}", self.n_channels);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "d_k = {}", self.d_k);
        let _ = writeln!(s, "d_v = {}", self.d_v);
        let _ = writeln!(s, "pool_factors = {}", factors.join(","));
        let _ = writeln!(s, "layers_encoder = {}", self.layers_encoder);
        let _ = writeln!(s, "layers_decoder = {}", self.layers_decoder);
        let _ = writeln!(s, "dropout_rate = {:?}", self.dropout_rate);
        let _ = writeln!(s, "use_skip = {}", self.use_skip);
        let _ = writeln!(s, "use_temporal_branch = {}", self.use_temporal_branch);
        let _ = writeln!(s, "use_spatial_branch = {}", self.use_spatial_branch);
        let _ = writeln!(s, "use_cfb = {}", self.use_cfb);
        let _ = writeln!(s, "time_period = {}", self.time_period);
        s
    }

    /// Reads model fields from a key/value map. Missing `d_k`/`d_v` default to
    /// `d_model / n_heads` and a missing `time_period` to one day of
    /// 10-minute records; every other field is required.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let d_model: usize = kv_parse(map, "d_model")?;
        let n_heads: usize = kv_parse(map, "n_heads")?;
        let per_head = d_model.checked_div(n_heads).unwrap_or(0);
        let cfg = ModelConfig {
            n_turbines: kv_parse(map, "n_turbines")?,
            history_len: kv_parse(map, "history_len")?,
            horizon_len: kv_parse(map, "horizon_len")?,
            n_channels: kv_parse(map, "n_channels")?,
            d_model,
            n_heads,
            d_k: kv_parse_or(map, "d_k", per_head)?,
            d_v: kv_parse_or(map, "d_v", per_head)?,
            pool_factors: parse_factors(kv_get(map, "pool_factors")?)?,
            layers_encoder: kv_parse(map, "layers_encoder")?,
            layers_decoder: kv_parse(map, "layers_decoder")?,
            dropout_rate: kv_parse(map, "dropout_rate")?,
            use_skip: kv_parse(map, "use_skip")?,
            use_temporal_branch: kv_parse(map, "use_temporal_branch")?,
            use_spatial_branch: kv_parse(map, "use_spatial_branch")?,
            use_cfb: kv_parse(map, "use_cfb")?,
            time_period: kv_parse_or(map, "time_period", 144)?,
        };
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn parse_factors(s: &str) -> Result<Vec<usize>> {
    let s = s.trim().trim_start_matches('[').trim_end_matches(']');
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::config(format!("bad pooling factor `{p}`"))))
        .collect()
}

fn kv_get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| Error::config(format!("missing key `{key}`")))
}

pub(crate) fn kv_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv_get(map, key)?;
    raw.parse().map_err(|_| Error::config(format!("bad value `{raw}` for `{key}`")))
}

pub(crate) fn kv_parse_or<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        Some(_) => kv_parse(map, key),
        None => Ok(default),
    }
}
