//! Parameter file: `HSTTNPAR`, version, config header (`key = value` text),
//! then every tensor in layout order as (name, rank, dims, f64 data).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::model::config::{parse_kv, ModelConfig};
use crate::model::params::ModelParameters;

const MAGIC: &[u8; 8] = b"HSTTNPAR";
const VERSION: u32 = 1;

pub(crate) fn write_block<W: Write>(w: &mut BinWriter<W>, cfg: &ModelConfig, params: &ModelParameters) -> Result<()> {
    w.str(&cfg.to_kv())?;
    w.len(params.len())?;
    for (name, t) in params.iter() {
        w.str(name)?;
        w.tensor(t)?;
    }
    Ok(())
}

pub(crate) fn read_block<R: Read>(r: &mut BinReader<R>) -> Result<(ModelConfig, ModelParameters)> {
    let header = r.str()?;
    let cfg = ModelConfig::from_kv(&parse_kv(&header)?).map_err(|e| Error::Format(format!("config header: {e}")))?;
    cfg.validate().map_err(|e| Error::Format(format!("config header: {e}")))?;
    let n = r.len()?;
    let mut named = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = r.str()?;
        named.push((name, r.tensor()?));
    }
    let params = ModelParameters::from_named(&cfg, named)?;
    Ok((cfg, params))
}

pub fn write_params<W: Write>(out: W, cfg: &ModelConfig, params: &ModelParameters) -> Result<()> {
    let mut w = BinWriter::new(out);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    write_block(&mut w, cfg, params)?;
    w.finish()?;
    Ok(())
}

pub fn read_params<R: Read>(input: R) -> Result<(ModelConfig, ModelParameters)> {
    let mut r = BinReader::new(input);
    r.magic(MAGIC, VERSION)?;
    let out = read_block(&mut r)?;
    r.expect_end()?;
    Ok(out)
}

/// Refuses to load parameters written for a different configuration.
pub fn read_params_for<R: Read>(input: R, expected: &ModelConfig) -> Result<ModelParameters> {
    let (cfg, params) = read_params(input)?;
    ensure_config_matches(&cfg, expected)?;
    Ok(params)
}

pub(crate) fn ensure_config_matches(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found == expected {
        return Ok(());
    }
    let (a, b) = (found.to_kv(), expected.to_kv());
    let diffs: Vec<String> = a
        .lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| format!("file has `{x}`, expected `{y}`"))
        .collect();
    Err(Error::config(format!("checkpoint configuration mismatch: {}", diffs.join("; "))))
}

pub fn save_params(path: &Path, cfg: &ModelConfig, params: &ModelParameters) -> Result<()> {
    write_params(BufWriter::new(File::create(path)?), cfg, params)
}

pub fn load_params(path: &Path, expected: &ModelConfig) -> Result<ModelParameters> {
    read_params_for(BufReader::new(File::open(path)?), expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::reference(3, 4);
        let params = ModelParameters::init(&cfg, &mut RngStream::new(8));
        let mut buf = Vec::new();
        write_params(&mut buf, &cfg, &params).unwrap();
        let (cfg2, back) = read_params(&buf[..]).unwrap();
        assert_eq!(cfg2, cfg);
        for ((n1, a), (n2, b)) in params.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &crate::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn refuses_config_mismatch() {
        let cfg = ModelConfig::reference(3, 4);
        let params = ModelParameters::init(&cfg, &mut RngStream::new(8));
        let mut buf = Vec::new();
        write_params(&mut buf, &cfg, &params).unwrap();
        let mut other = cfg.clone();
        other.use_skip = false;
        match read_params_for(&buf[..], &other) {
            Err(Error::Config(msg)) => assert!(msg.contains("use_skip")),
            r => panic!("expected mismatch, got {r:?}"),
        }
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::reference(2, 2);
        let params = ModelParameters::zeros(&cfg);
        let mut buf = Vec::new();
        write_params(&mut buf, &cfg, &params).unwrap();
        assert!(read_params(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&bad[..]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_params(&long[..]).is_err());
    }
}
