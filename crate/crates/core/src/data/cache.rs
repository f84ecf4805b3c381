//! Binary dataset cache: `HSTTNDAT`, version, schema text, turbine ids,
//! start slot, timestamp count, values, then one byte per validity flag.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{BinReader, BinWriter};
use crate::data::records::RecordSet;
use crate::data::schema::Schema;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSTTNDAT";
const VERSION: u32 = 1;

pub fn write_cache<W: Write>(out: W, rs: &RecordSet) -> Result<()> {
    let mut w = BinWriter::new(out);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.str(&rs.schema().to_text())?;
    w.len(rs.n_turbines())?;
    for id in rs.turbine_ids() {
        w.str(id)?;
    }
    w.u64(rs.start_slot())?;
    w.len(rs.n_timestamps())?;
    w.f64s(rs.values())?;
    w.len(rs.validity().len())?;
    for &v in rs.validity() {
        w.u8(v as u8)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_cache<R: Read>(input: R) -> Result<RecordSet> {
    let mut r = BinReader::new(input);
    r.magic(MAGIC, VERSION)?;
    let schema = Schema::parse(&r.str()?).map_err(|e| Error::Format(format!("embedded schema: {e}")))?;
    let n = r.len()?;
    let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let start = r.u64()?;
    let t = r.len()?;
    let values = r.f64s()?;
    let flags = r.len()?;
    let validity = (0..flags)
        .map(|_| match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("validity byte {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    RecordSet::from_parts(schema, ids, start, t, values, validity).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_cache(path: &Path, rs: &RecordSet) -> Result<()> {
    write_cache(BufWriter::new(File::create(path)?), rs)
}

pub fn load_cache(path: &Path) -> Result<RecordSet> {
    read_cache(BufReader::new(File::open(path)?))
}
