use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use hsttn_core::data::{self, cache, history_at, synth, RecordSet, Schema, WindowSet};
use hsttn_core::eval::{evaluate, evaluate_persistence, Forecaster};
use hsttn_core::model::make_variant;
use hsttn_core::train::{train, write_log, Checkpoint};

use crate::config::{is_cache, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot;

pub struct SynthOptions {
    pub turbines: usize,
    pub timestamps: usize,
    pub channels: usize,
    pub seed: u64,
    pub noise: f64,
    pub out: PathBuf,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn io_context(path: &Path) -> impl Fn(hsttn_core::Error) -> CliError + '_ {
    move |e| match e {
        hsttn_core::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    }
}

pub fn synth(opts: &SynthOptions) -> CliResult<()> {
    let spec = synth::SynthSpec {
        noise: opts.noise,
        ..synth::SynthSpec::new(opts.turbines, opts.timestamps, opts.channels, opts.seed)
    };
    let rs = synth::generate(&spec)?;
    create_dir(&opts.out)?;
    let records = opts.out.join("records.csv");
    let schema = opts.out.join("schema.txt");
    data::save_records(&records, &rs).map_err(io_context(&records))?;
    fs::write(&schema, rs.schema().to_text()).map_err(|e| CliError::Io(format!("{}: {e}", schema.display())))?;
    println!("wrote {} and {}", records.display(), schema.display());
    Ok(())
}

/// Dataset with the schema's invalidity rules applied.
fn load_dataset(run: &RunConfig) -> CliResult<RecordSet> {
    let rs = if is_cache(&run.data) {
        cache::load_cache(&run.data).map_err(io_context(&run.data))?
    } else {
        let schema_path = run.schema.as_ref().ok_or_else(|| CliError::usage("configuration lacks `schema`"))?;
        let schema = Schema::load(schema_path).map_err(io_context(schema_path))?;
        data::load_records(&run.data, &schema).map_err(io_context(&run.data))?
    };
    let rules = rs.schema().rules.clone();
    Ok(data::mark_invalid(&rs, &rules)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn train_cmd(run: &RunConfig) -> CliResult<()> {
    run.validate()?;
    let raw = load_dataset(run)?;
    let model_cfg = run.model_for(&raw)?;
    let splits = run.splits.resolve(raw.n_timestamps())?;
    let (h, f) = (model_cfg.history_len, model_cfg.horizon_len);
    let stats = data::fit_zscore(&raw, splits.train.clone())?;
    let rs = data::apply_zscore(&raw, &stats)?;
    let tr = WindowSet::new(&rs, splits.train.clone(), h, f, run.train_stride)?;
    let va = WindowSet::new(&rs, splits.val.clone(), h, f, run.eval_stride)?;
    let model = make_variant(model_cfg)?;
    info!("training on {} windows, validating on {}", tr.len(), va.len());

    let outcome = train(&model, &tr, &va, &stats, &run.train)?;
    create_dir(&run.out)?;
    let bytes = outcome.checkpoint.to_bytes();
    let ck_path = run.out.join("checkpoint.bin");
    fs::write(&ck_path, &bytes).map_err(|e| CliError::Io(format!("{}: {e}", ck_path.display())))?;
    let mut log_text = Vec::new();
    write_log(&mut log_text, &outcome.log)?;
    fs::write(run.out.join("train_log.csv"), log_text)?;
    println!(
        "best epoch {} validation loss {:?}",
        outcome.checkpoint.epoch, outcome.checkpoint.val_loss
    );
    println!("checkpoint {} sha256 {}", ck_path.display(), sha256_hex(&bytes));
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(io_context(path))
}

/// Dataset normalized with the checkpoint's statistics.
fn normalized_for(run: &RunConfig, ck: &Checkpoint) -> CliResult<RecordSet> {
    let raw = load_dataset(run)?;
    if raw.n_channels() != ck.norm.n_channels() || raw.n_turbines() != ck.model.n_turbines {
        return Err(CliError::usage(format!(
            "dataset has {} turbines and {} channels, checkpoint expects {} and {}",
            raw.n_turbines(),
            raw.n_channels(),
            ck.model.n_turbines,
            ck.norm.n_channels()
        )));
    }
    Ok(data::apply_zscore(&raw, &ck.norm)?)
}

pub fn predict_cmd(run: &RunConfig, checkpoint: &Path, origin: usize) -> CliResult<()> {
    run.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    let (h, f) = (ck.model.history_len, ck.model.horizon_len);
    let rs = normalized_for(run, &ck)?;
    if origin < h || origin > rs.n_timestamps() {
        return Err(CliError::usage(format!(
            "origin {origin} needs {h} history steps before it within {} timestamps",
            rs.n_timestamps()
        )));
    }
    let forecaster = Forecaster::new(&ck)?;
    let target = rs.target_index();
    let history = history_at(&rs, origin, h)?;
    let y_hat = forecaster.forecast_at(&history, origin, target)?;

    create_dir(&run.out)?;
    let ids = rs.turbine_ids().to_vec();
    let rows: Vec<Vec<Option<f64>>> = y_hat.data().chunks(f).map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
    let fc_path = run.out.join("forecast.csv");
    plot::write_series(&fc_path, &ids, &rows)?;
    println!("wrote {} ({} rows)", fc_path.display(), ids.len() * f);
    if origin + f <= rs.n_timestamps() {
        let truth: Vec<Vec<Option<f64>>> = (0..rs.n_turbines())
            .map(|n| {
                (origin..origin + f)
                    .map(|t| rs.is_valid(n, t).then(|| ck.norm.invert(target, rs.value(n, t, target))))
                    .collect()
            })
            .collect();
        let truth_path = run.out.join("truth.csv");
        plot::write_series(&truth_path, &ids, &truth)?;
        println!("wrote {}", truth_path.display());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

pub fn evaluate_cmd(run: &RunConfig, checkpoint: &Path, split: SplitName, stride: Option<usize>) -> CliResult<()> {
    run.validate()?;
    let stride = stride.unwrap_or(run.eval_stride);
    if stride == 0 {
        return Err(CliError::usage("stride must be positive"));
    }
    let ck = load_checkpoint(checkpoint)?;
    let rs = normalized_for(run, &ck)?;
    let splits = run.splits.resolve(rs.n_timestamps())?;
    let range = match split {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
    };
    let mut ws = WindowSet::new(&rs, range, ck.model.history_len, ck.model.horizon_len, stride)?;
    ws.retain_scorable();
    let report = evaluate(&ck, &ws, run.scale)?;
    let baseline = evaluate_persistence(&ws, &ck.norm, run.scale)?;

    create_dir(&run.out)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(run.out.join("metrics.csv"), csv)?;
    fs::write(run.out.join("metrics.txt"), report.to_kv())?;
    println!("windows {} samples {}", ws.len(), report.samples());
    println!("mae {:?} rmse {:?} ({})", report.mae, report.rmse, report.scale.name());
    println!("persistence mae {:?} rmse {:?}", baseline.mae, baseline.rmse);
    if !report.excluded.is_empty() {
        println!("excluded turbines without valid samples: {}", report.excluded.join(","));
    }
    Ok(())
}

pub fn plot_cmd(forecast: &Path, truth: &Path, turbine: Option<usize>, out: &Path) -> CliResult<()> {
    let fc = plot::read_series(forecast)?;
    let tr = plot::read_series(truth)?;
    let selected: Vec<usize> = match turbine {
        Some(i) if i >= fc.turbines.len() => {
            return Err(CliError::usage(format!(
                "turbine {i} out of range: the forecast covers {} turbines",
                fc.turbines.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..fc.turbines.len()).collect(),
    };
    let svg = plot::render_svg(&fc, &tr, &selected)?;
    create_dir(out)?;
    let path = out.join("forecast.svg");
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
