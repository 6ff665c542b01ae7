//! Checkpoint files: `DSCCAKPT`, a little-endian `u32` format version, a
//! `u64` payload length, then the JSON payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelMode};
use crate::dcca::train::DsccaModel;
use crate::error::{Error, Result};
use crate::ranking::RankingModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSCCAKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum TrainedModel {
    Dcca(Box<DsccaModel>),
    Ranking(Box<RankingModel>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub mode: ModelMode,
    pub config: ExperimentConfig,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn best_epoch(&self) -> usize {
        match &self.model {
            TrainedModel::Dcca(m) => m.best_epoch,
            TrainedModel::Ranking(m) => m.best_epoch,
        }
    }

    pub fn into_ranking(self) -> Result<RankingModel> {
        match self.model {
            TrainedModel::Ranking(m) => Ok(*m),
            TrainedModel::Dcca(_) => Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, a ranking model is required",
                self.mode.as_str()
            ))),
        }
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let payload = serde_json::to_vec(checkpoint).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    if bytes.len() < 20 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[20..];
    if payload.len() != len {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    serde_json::from_slice(payload).map_err(|e| Error::Checkpoint(e.to_string()))
}
