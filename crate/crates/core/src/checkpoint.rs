//! Checkpoint file: magic, JSON header, then θ and (optionally) φ archives.

use std::io::{Read, Write};
use std::path::Path;

use assertrag_nn::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RetrieverEncoder, Seq2SeqModel};
use crate::trainer::{TrainConfig, TrainedState, TrainingHistory};

const MAGIC: &[u8; 8] = b"ARCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    tokenizer_hash: String,
    history: TrainingHistory,
    epoch: usize,
    has_retriever: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub retriever: Option<RetrieverEncoder>,
    pub train: TrainConfig,
    pub tokenizer_hash: String,
    pub history: TrainingHistory,
    pub epoch: usize,
}

impl Checkpoint {
    /// Wall-clock times are dropped from `history` so that replayed runs
    /// write identical files.
    pub fn from_state(state: &TrainedState, train: &TrainConfig, tokenizer_hash: &str, history: &TrainingHistory) -> Self {
        Self {
            model: state.model.clone(),
            retriever: state.retriever.clone(),
            train: train.clone(),
            tokenizer_hash: tokenizer_hash.to_string(),
            history: history.without_timing(),
            epoch: state.epoch,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            history: self.history.clone(),
            epoch: self.epoch,
            has_retriever: self.retriever.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        self.model.params.write_archive(&mut w)?;
        if let Some(r) = &self.retriever {
            r.params.write_archive(&mut w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.model.validate()?;
        let params = ParamStore::read_archive(&mut r)?;
        let model = Seq2SeqModel { config: header.model.clone(), params };
        check_shapes(&model)?;
        let retriever = if header.has_retriever {
            Some(RetrieverEncoder { config: header.model.clone(), params: ParamStore::read_archive(&mut r)? })
        } else {
            None
        };
        Ok(Self {
            model,
            retriever,
            train: header.train,
            tokenizer_hash: header.tokenizer_hash,
            history: header.history,
            epoch: header.epoch,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Refuses to pair this model with a tokenizer it was not trained with.
    pub fn check_tokenizer(&self, tokenizer_hash: &str) -> Result<()> {
        if self.tokenizer_hash != tokenizer_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects tokenizer {} but got {}",
                self.tokenizer_hash, tokenizer_hash
            )));
        }
        Ok(())
    }
}

fn check_shapes(model: &Seq2SeqModel) -> Result<()> {
    let reference = Seq2SeqModel::new(model.config.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        let got = model.params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameters".into()));
    }
    Ok(())
}
