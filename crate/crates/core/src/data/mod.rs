//! Record ingestion, validity masking, normalization, windowing and
//! synthetic farms.

pub mod cache;
mod norm;
mod records;
mod schema;
pub mod synth;
mod window;

pub use norm::{apply_zscore, fit_zscore, invert_zscore, NormStats, STD_FLOOR};
pub use records::{load_records, mark_invalid, read_records, save_records, write_records, RecordSet};
pub use schema::{default_rules, Cmp, Rule, Schema, Term};
pub use synth::{synth_generate, SynthSpec};
pub use window::{history_at, make_windows, window_at, window_count, SampleWindow, Splits, WindowSet};
