//! Deterministic synthetic wind farm for desk-scale runs.

use std::f64::consts::TAU;

use crate::data::records::RecordSet;
use crate::data::schema::Schema;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const RATED_POWER: f64 = 1500.0;
pub const CUT_IN: f64 = 3.0;
pub const RATED_SPEED: f64 = 12.0;
pub const CUT_OUT: f64 = 25.0;
/// Slots per day at 10-minute sampling.
pub const DIURNAL_PERIOD: f64 = 144.0;

const EXTRA_NAMES: [&str; 8] = ["Wdir", "Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3", "Prtv"];

/// Cubic ramp between cut-in and rated speed, flat to cut-out, zero beyond.
pub fn power_curve(wind: f64) -> f64 {
    if !(CUT_IN..CUT_OUT).contains(&wind) {
        0.0
    } else if wind >= RATED_SPEED {
        RATED_POWER
    } else {
        let (c3, r3) = (CUT_IN.powi(3), RATED_SPEED.powi(3));
        RATED_POWER * (wind.powi(3) - c3) / (r3 - c3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_turbines: usize,
    pub n_timestamps: usize,
    /// Wind speed first, target (`Patv`) last, auxiliary channels between.
    pub n_channels: usize,
    pub seed: u64,
    /// Multiplier on every noise source; 0 gives a noiseless farm.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(n_turbines: usize, n_timestamps: usize, n_channels: usize, seed: u64) -> Self {
        SynthSpec { n_turbines, n_timestamps, n_channels, seed, noise: 1.0 }
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_channels);
        if self.n_channels > 1 {
            names.push("Wspd".to_string());
            for i in 0..self.n_channels - 2 {
                names.push(EXTRA_NAMES.get(i).map_or_else(|| format!("Aux{}", i + 1), |s| s.to_string()));
            }
        }
        names.push("Patv".to_string());
        names
    }

    pub fn schema(&self) -> Schema {
        Schema::with_channels(self.channel_names(), "Patv")
    }
}

pub fn synth_generate(n_turbines: usize, n_timestamps: usize, n_channels: usize, seed: u64) -> Result<RecordSet> {
    generate(&SynthSpec::new(n_turbines, n_timestamps, n_channels, seed))
}

pub fn generate(spec: &SynthSpec) -> Result<RecordSet> {
    let (n, t_total, c) = (spec.n_turbines, spec.n_timestamps, spec.n_channels);
    if n == 0 || t_total == 0 || c == 0 {
        return Err(Error::config(format!("synthetic sizes must be positive, got {n}×{t_total}×{c}")));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::config(format!("noise multiplier {} must be finite and non-negative", spec.noise)));
    }
    let root = RngStream::new(spec.seed);
    let mut layout = root.derive(0);
    let phases: Vec<f64> = (0..n).map(|_| layout.uniform_range(0.0, 24.0)).collect();
    let gains: Vec<f64> = (0..n).map(|_| layout.uniform_range(0.9, 1.1)).collect();
    let aux_phase: Vec<f64> = (0..c).map(|_| layout.uniform_range(0.0, TAU)).collect();

    // AR(1) noise: one farm-wide component plus one per turbine.
    let mut noise_rng = root.derive(1);
    let rho = 0.95;
    let innov = (1.0f64 - rho * rho).sqrt();
    let mut farm = vec![0.0; t_total];
    let mut local = vec![0.0; n * t_total];
    let mut fs = 0.0;
    let mut ls = vec![0.0; n];
    for t in 0..t_total {
        fs = rho * fs + innov * noise_rng.normal();
        farm[t] = fs;
        for (i, l) in ls.iter_mut().enumerate() {
            *l = rho * *l + innov * noise_rng.normal();
            local[i * t_total + t] = *l;
        }
    }
    let mut obs_rng = root.derive(2);

    let mut values = Vec::with_capacity(n * t_total * c);
    for i in 0..n {
        for t in 0..t_total {
            let tf = t as f64;
            let diurnal = (TAU * (tf + phases[i]) / DIURNAL_PERIOD).sin();
            let clean = gains[i] * (8.0 + 3.5 * diurnal);
            let wind = (clean + spec.noise * (1.2 * farm[t] + 0.5 * local[i * t_total + t])).max(0.0);
            let power = (power_curve(wind) + spec.noise * 15.0 * obs_rng.normal()).max(0.0);
            if c > 1 {
                values.push(wind);
                for (k, phase) in aux_phase.iter().enumerate().take(c - 1).skip(1) {
                    let period = DIURNAL_PERIOD / k as f64;
                    let base = (TAU * tf / period + phase).sin();
                    values.push(10.0 * base + 0.3 * diurnal * k as f64 + spec.noise * obs_rng.normal());
                }
            }
            values.push(power);
        }
    }
    let ids = (1..=n).map(|i| i.to_string()).collect();
    RecordSet::from_parts(spec.schema(), ids, 144, t_total, values, vec![true; n * t_total])
}
