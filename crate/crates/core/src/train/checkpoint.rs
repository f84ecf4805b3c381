//! Training checkpoint: `HSTTNCKP`, version, model block (config header and
//! tensors), epoch, validation loss, normalization statistics and the
//! training configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{BinReader, BinWriter};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::codec::{read_block, write_block};
use crate::model::{parse_kv, ModelConfig, ModelParameters};
use crate::train::config::TrainConfig;

const MAGIC: &[u8; 8] = b"HSTTNCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParameters,
    /// Epochs completed when the snapshot was taken; 0 is the initialization.
    pub epoch: usize,
    pub val_loss: f64,
    pub norm: NormStats,
    pub train: TrainConfig,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BinWriter::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        write_block(&mut w, &self.model, &self.params)?;
        w.u64(self.epoch as u64)?;
        w.f64(self.val_loss)?;
        w.f64s(&self.norm.mean)?;
        w.f64s(&self.norm.std)?;
        w.str(&self.train.to_kv())?;
        w.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Checkpoint> {
        let mut r = BinReader::new(input);
        r.magic(MAGIC, VERSION)?;
        let (model, params) = read_block(&mut r)?;
        let epoch = r.u64()? as usize;
        let val_loss = r.f64()?;
        let mean = r.f64s()?;
        let std = r.f64s()?;
        if mean.len() != std.len() || mean.len() != model.n_channels {
            return Err(Error::Format(format!(
                "{} means and {} deviations for {} channels",
                mean.len(),
                std.len(),
                model.n_channels
            )));
        }
        let train = TrainConfig::from_kv_strict(&parse_kv(&r.str()?)?)
            .map_err(|e| Error::Format(format!("training header: {e}")))?;
        r.expect_end()?;
        Ok(Checkpoint { model, params, epoch, val_loss, norm: NormStats { mean, std }, train })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("in-memory write");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::read(BufReader::new(File::open(path)?))
    }
}
