use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::schema::{Rule, Schema};
use crate::error::{Error, Result};

/// Dense `N × T × C` grid of farm records with a per-record validity mask.
///
/// Timestamps are consecutive sampling slots starting at `start_slot`
/// (slot = day · slots_per_day + minute / interval). Missing values are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    schema: Schema,
    turbine_ids: Vec<String>,
    start_slot: u64,
    n_timestamps: usize,
    values: Vec<f64>,
    validity: Vec<bool>,
}

impl RecordSet {
    pub fn from_parts(
        schema: Schema,
        turbine_ids: Vec<String>,
        start_slot: u64,
        n_timestamps: usize,
        values: Vec<f64>,
        validity: Vec<bool>,
    ) -> Result<RecordSet> {
        schema.validate()?;
        let (n, c) = (turbine_ids.len(), schema.n_channels());
        if n == 0 || n_timestamps == 0 {
            return Err(Error::EmptyDataset("record set without turbines or timestamps".into()));
        }
        if values.len() != n * n_timestamps * c || validity.len() != n * n_timestamps {
            return Err(Error::shape(format!(
                "{} values and {} flags for {n} turbines, {n_timestamps} timestamps, {c} channels",
                values.len(),
                validity.len()
            )));
        }
        Ok(RecordSet { schema, turbine_ids, start_slot, n_timestamps, values, validity })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn turbine_ids(&self) -> &[String] {
        &self.turbine_ids
    }

    pub fn start_slot(&self) -> u64 {
        self.start_slot
    }

    pub fn n_turbines(&self) -> usize {
        self.turbine_ids.len()
    }

    pub fn n_timestamps(&self) -> usize {
        self.n_timestamps
    }

    pub fn n_channels(&self) -> usize {
        self.schema.n_channels()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.schema.input_channels()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names().iter().position(|c| c == name)
    }

    pub fn target_index(&self) -> usize {
        self.channel_index(&self.schema.target).expect("validated schema")
    }

    fn offset(&self, n: usize, t: usize) -> usize {
        (n * self.n_timestamps + t) * self.n_channels()
    }

    pub fn value(&self, n: usize, t: usize, c: usize) -> f64 {
        self.values[self.offset(n, t) + c]
    }

    /// All channels of one record.
    pub fn record(&self, n: usize, t: usize) -> &[f64] {
        let o = self.offset(n, t);
        &self.values[o..o + self.n_channels()]
    }

    pub fn is_valid(&self, n: usize, t: usize) -> bool {
        self.validity[n * self.n_timestamps + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn validity_mut(&mut self) -> &mut [bool] {
        &mut self.validity
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> RecordSet {
        RecordSet { values, ..self.clone() }
    }

    fn slot_label(&self, t: usize) -> (u64, u32) {
        let slot = self.start_slot + t as u64;
        let spd = self.schema.slots_per_day();
        (slot / spd, (slot % spd) as u32 * self.schema.interval_minutes)
    }
}

fn parse_minutes(field: &str) -> Option<u32> {
    let parts: Vec<&str> = field.split(':').collect();
    match parts.as_slice() {
        [m] => m.parse().ok(),
        [h, m] | [h, m, _] => {
            let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
            (m < 60).then_some(h * 60 + m)
        }
        _ => None,
    }
}

fn format_minutes(m: u32) -> String {
    format!("{:02}:{:02}", m / 60, m % 60)
}

fn parse_cell(field: &str) -> std::result::Result<f64, ()> {
    if field.is_empty() || field.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    field.parse::<f64>().map_err(|_| ())
}

/// Ordering for turbine ids: numeric when every id is an integer.
fn sort_ids(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        ids.sort();
    }
}

struct Row {
    line: usize,
    turbine: String,
    slot: u64,
    cells: Vec<f64>,
}

pub fn read_records<R: Read>(reader: R, schema: &Schema) -> Result<RecordSet> {
    schema.validate()?;
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv
        .headers()
        .map_err(|e| Error::Ingest { row: 1, message: e.to_string() })?
        .clone();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        let known = name == schema.turbine_column
            || name == schema.day_column
            || name == schema.time_column
            || schema.channels.iter().any(|c| c == name);
        if !known {
            return Err(Error::Ingest { row: 1, message: format!("unknown column `{name}`") });
        }
        if pos.insert(name, i).is_some() {
            return Err(Error::Ingest { row: 1, message: format!("column `{name}` repeated") });
        }
    }
    let required = [&schema.turbine_column, &schema.day_column, &schema.time_column];
    for name in required.into_iter().chain(&schema.channels) {
        if !pos.contains_key(name.as_str()) {
            return Err(Error::Ingest { row: 1, message: format!("missing column `{name}`") });
        }
    }
    let (ti, di, mi) = (pos[schema.turbine_column.as_str()], pos[schema.day_column.as_str()], pos[schema.time_column.as_str()]);
    let chan_pos: Vec<usize> = schema.channels.iter().map(|c| pos[c.as_str()]).collect();
    let spd = schema.slots_per_day();

    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec.map_err(|e| Error::Ingest {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Ingest { row: line, message };
        let turbine = rec[ti].to_string();
        if turbine.is_empty() {
            return Err(bad("empty turbine id".into()));
        }
        let day: u64 = rec[di].parse().map_err(|_| bad(format!("unparseable day `{}`", &rec[di])))?;
        let minutes = parse_minutes(&rec[mi]).ok_or_else(|| bad(format!("unparseable time `{}`", &rec[mi])))?;
        if minutes >= 24 * 60 || minutes % schema.interval_minutes != 0 {
            return Err(bad(format!("time `{}` is off the {}-minute grid", &rec[mi], schema.interval_minutes)));
        }
        let cells = chan_pos
            .iter()
            .zip(&schema.channels)
            .map(|(&p, name)| parse_cell(&rec[p]).map_err(|_| bad(format!("unparseable {name} value `{}`", &rec[p]))))
            .collect::<Result<Vec<f64>>>()?;
        let slot = day * spd + (minutes / schema.interval_minutes) as u64;
        rows.push(Row { line, turbine, slot, cells });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset("record file has no data rows".into()));
    }

    let mut ids: Vec<String> = rows.iter().map(|r| r.turbine.clone()).collect();
    sort_ids(&mut ids);
    ids.dedup();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let start = rows.iter().map(|r| r.slot).min().unwrap();
    let t_total = (rows.iter().map(|r| r.slot).max().unwrap() - start + 1) as usize;
    let (n, c) = (ids.len(), schema.n_channels());
    let keys = if schema.keys_as_channels { 3 } else { 0 };

    let mut values = vec![f64::NAN; n * t_total * c];
    let mut validity = vec![false; n * t_total];
    let mut seen = vec![false; n * t_total];
    for row in &rows {
        let (ni, t) = (index[row.turbine.as_str()], (row.slot - start) as usize);
        let cell = ni * t_total + t;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::Ingest {
                row: row.line,
                message: format!("duplicate record for turbine {} at slot {}", row.turbine, row.slot),
            });
        }
        values[cell * c + keys..(cell + 1) * c].copy_from_slice(&row.cells);
        validity[cell] = row.cells.iter().all(|v| !v.is_nan());
    }
    if keys > 0 {
        for (ni, id) in ids.iter().enumerate() {
            let id_value = id.parse::<f64>().unwrap_or((ni + 1) as f64);
            for t in 0..t_total {
                let slot = start + t as u64;
                let o = (ni * t_total + t) * c;
                values[o] = id_value;
                values[o + 1] = (slot / spd) as f64;
                values[o + 2] = ((slot % spd) as u32 * schema.interval_minutes) as f64;
            }
        }
    }
    RecordSet::from_parts(schema.clone(), ids, start, t_total, values, validity)
}

/// Reads a comma-separated record file into a dense grid.
pub fn load_records(path: &Path, schema: &Schema) -> Result<RecordSet> {
    read_records(std::fs::File::open(path)?, schema)
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes every grid cell as one row; missing values become empty fields.
pub fn write_records<W: Write>(writer: W, rs: &RecordSet) -> Result<()> {
    let schema = rs.schema();
    let mut csv = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec![schema.turbine_column.as_str(), schema.day_column.as_str(), schema.time_column.as_str()];
    header.extend(schema.channels.iter().map(String::as_str));
    csv.write_record(&header).map_err(csv_err)?;
    let keys = if schema.keys_as_channels { 3 } else { 0 };
    for (n, id) in rs.turbine_ids().iter().enumerate() {
        for t in 0..rs.n_timestamps() {
            let (day, minute) = rs.slot_label(t);
            let mut row = vec![id.clone(), day.to_string(), format_minutes(minute)];
            row.extend(rs.record(n, t)[keys..].iter().map(|&v| format_cell(v)));
            csv.write_record(&row).map_err(csv_err)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn save_records(path: &Path, rs: &RecordSet) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(file, rs)
}

/// Clears validity wherever any rule fires.
pub fn mark_invalid(rs: &RecordSet, rules: &[Rule]) -> Result<RecordSet> {
    let names = rs.channel_names();
    let compiled = rules
        .iter()
        .map(|rule| {
            rule.terms
                .iter()
                .map(|term| {
                    names
                        .iter()
                        .position(|c| c == &term.channel)
                        .map(|c| (c, term))
                        .ok_or_else(|| Error::config(format!("rule `{rule}` references unknown channel `{}`", term.channel)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = rs.clone();
    for n in 0..rs.n_turbines() {
        for t in 0..rs.n_timestamps() {
            let rec = rs.record(n, t);
            let fires = compiled.iter().any(|terms| {
                terms.iter().all(|(c, term)| {
                    let v = if term.abs { rec[*c].abs() } else { rec[*c] };
                    term.cmp.holds(v, term.value)
                })
            });
            if fires {
                out.validity[n * rs.n_timestamps + t] = false;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_channel() -> Schema {
        Schema::with_channels(vec!["Wspd".into(), "Patv".into()], "Patv")
    }

    fn parse(text: &str, schema: &Schema) -> Result<RecordSet> {
        read_records(text.as_bytes(), schema)
    }

    const FULL: &str = "TurbID,Day,Tmstamp,Wspd,Patv\n\
        1,1,00:00,5.0,100\n1,1,00:10,6.0,150\n1,1,00:20,7.0,200\n\
        2,1,00:00,4.5,80\n2,1,00:10,5.5,120\n2,1,00:20,6.5,180\n";

    #[test]
    fn full_grid_is_all_valid() {
        let rs = parse(FULL, &two_channel()).unwrap();
        assert_eq!((rs.n_turbines(), rs.n_timestamps(), rs.n_channels()), (2, 3, 2));
        assert!(rs.validity().iter().all(|&v| v));
        assert_eq!(rs.value(1, 2, 1), 180.0);
        assert_eq!(rs.start_slot(), 144);
    }

    #[test]
    fn missing_target_marks_record_invalid() {
        let text = FULL.replace("1,1,00:10,6.0,150", "1,1,00:10,6.0,");
        let rs = parse(&text, &two_channel()).unwrap();
        assert!(!rs.is_valid(0, 1));
        assert_eq!(rs.valid_count(), 5);
        assert!(rs.value(0, 1, 1).is_nan());
        assert_eq!(rs.value(0, 1, 0), 6.0);
    }

    #[test]
    fn gaps_and_row_order_yield_dense_grid() {
        let text = "TurbID,Day,Tmstamp,Wspd,Patv\n10,1,00:20,1,1\n2,1,00:00,2,2\n10,1,00:00,3,3\n";
        let rs = parse(text, &two_channel()).unwrap();
        assert_eq!(rs.turbine_ids(), ["2", "10"]);
        assert_eq!(rs.n_timestamps(), 3);
        assert_eq!(rs.validity(), [true, false, false, true, false, true]);
    }

    #[test]
    fn ingest_errors_carry_row_numbers() {
        let s = two_channel();
        let err = parse("TurbID,Day,Tmstamp,Wspd,Patv,Foo\n", &s).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 1, .. }), "{err}");
        let err = parse(&FULL.replace("6.5,180", "6.5,abc"), &s).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 7, .. }), "{err}");
        let dup = format!("{FULL}2,1,00:10,1,1\n");
        let err = parse(&dup, &s).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: 8, .. }), "{err}");
        assert!(matches!(parse("TurbID,Day,Tmstamp,Wspd\n", &s), Err(Error::Ingest { row: 1, .. })));
        assert!(matches!(parse(&FULL.replace("00:20,7.0", "00:25,7.0"), &s), Err(Error::Ingest { row: 4, .. })));
    }

    #[test]
    fn sdwpf_keys_become_channels() {
        let s = Schema::sdwpf();
        let text = "TurbID,Day,Tmstamp,Wspd,Wdir,Etmp,Itmp,Ndir,Pab1,Pab2,Pab3,Prtv,Patv\n\
            1,3,01:30,6.2,-3.1,30.1,41.2,25.5,1,1,1,-0.2,420.0\n";
        let rs = parse(text, &s).unwrap();
        assert_eq!(rs.n_channels(), 13);
        assert_eq!(&rs.record(0, 0)[..3], &[1.0, 3.0, 90.0]);
        assert_eq!(rs.target_index(), 12);
    }

    #[test]
    fn write_then_read_is_lossless() {
        let text = FULL.replace("1,1,00:10,6.0,150", "1,1,00:10,0.1,").replace("2,1,00:00,4.5,80\n", "");
        let rs = parse(&text, &two_channel()).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &rs).unwrap();
        let back = read_records(buf.as_slice(), &two_channel()).unwrap();
        assert_eq!(back.validity(), rs.validity());
        assert_eq!(back.turbine_ids(), rs.turbine_ids());
        assert_eq!(back.start_slot(), rs.start_slot());
        let bits = |r: &RecordSet| r.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rs));
    }

    #[test]
    fn rules_clear_validity() {
        let text = FULL.replace("2,1,00:10,5.5,120", "2,1,00:10,5.5,-5");
        let rs = parse(&text, &two_channel()).unwrap();
        assert_eq!(mark_invalid(&rs, &[]).unwrap(), rs);
        let out = mark_invalid(&rs, &[Rule::parse("Patv < 0").unwrap()]).unwrap();
        assert!(!out.is_valid(1, 1));
        assert_eq!(out.valid_count(), 5);
        let never = Rule::parse("Wspd < 0 & Wspd > 0").unwrap();
        assert_eq!(mark_invalid(&rs, &[never]).unwrap(), rs);
        assert!(matches!(mark_invalid(&rs, &[Rule::parse("Ndir > 1").unwrap()]), Err(Error::Config(_))));
    }
}
