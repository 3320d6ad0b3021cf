//! Flat `key = value` run configuration. The file is read as TOML, so
//! strings are quoted and numbers are bare.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use assertrag::model::ModelConfig;
use assertrag::retriever::ProbMode;
use assertrag::tokenizer::DEFAULT_VOCAB_SIZE;
use assertrag::trainer::{RetrieverMode, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "ASSERTRAG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // paths; command-line flags take precedence
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<PathBuf>,

    pub batch_size: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retriever_lr: Option<f64>,
    pub max_epochs: usize,
    pub k: usize,
    pub patience: usize,
    pub mode: RetrieverMode,
    /// `softmax` or `linear`.
    pub prob_mode: String,
    pub temperature: f64,
    /// Index refresh period in batches; absent means once per epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refresh_batches: Option<usize>,
    pub seed: u64,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub valid_beam: usize,
    pub beam: usize,

    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub tie_output: bool,
    pub vocab_size: usize,

    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::desk(DEFAULT_VOCAB_SIZE);
        let temperature = match t.prob_mode {
            ProbMode::Softmax { temperature } => temperature,
            ProbMode::Linear => 1.0,
        };
        Self {
            data: None,
            tokenizer: None,
            checkpoint: None,
            index: None,
            reports: None,
            batch_size: t.batch_size,
            lr: t.lr,
            retriever_lr: t.retriever_lr,
            max_epochs: t.max_epochs,
            k: t.k,
            patience: t.patience,
            mode: t.mode,
            prob_mode: "softmax".into(),
            temperature,
            refresh_batches: t.refresh_batches,
            seed: t.seed,
            max_input_len: t.max_input_len,
            max_output_len: t.max_output_len,
            valid_beam: t.valid_beam,
            beam: t.beam,
            d_model: m.d_model,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ff_mult: m.ff_mult,
            dropout: m.dropout,
            tie_output: m.tie_output,
            vocab_size: DEFAULT_VOCAB_SIZE,
            split_seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults, then the config file (flag, else `ASSERTRAG_CONFIG`), then
    /// `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut table = match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                bail!("override '{o}' is not key=value");
            };
            let key = key.trim();
            let value = value.trim();
            // bare words are taken as strings so `--set mode=jaccard` works
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.train()?.validate()?;
        cfg.model(cfg.vocab_size)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn prob_mode(&self) -> Result<ProbMode> {
        match self.prob_mode.as_str() {
            "softmax" => Ok(ProbMode::Softmax { temperature: self.temperature }),
            "linear" => Ok(ProbMode::Linear),
            other => bail!("prob_mode must be softmax or linear, got '{other}'"),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            retriever_lr: self.retriever_lr,
            max_epochs: self.max_epochs,
            k: self.k,
            patience: self.patience,
            mode: self.mode,
            prob_mode: self.prob_mode()?,
            refresh_batches: self.refresh_batches,
            seed: self.seed,
            max_input_len: self.max_input_len,
            max_output_len: self.max_output_len,
            valid_beam: self.valid_beam,
            beam: self.beam,
        })
    }

    pub fn model(&self, vocab_size: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            d_model: self.d_model,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            vocab_size,
            max_input_len: self.max_input_len,
            max_output_len: self.max_output_len,
            dropout: self.dropout,
            tie_output: self.tie_output,
        };
        m.validate()?;
        Ok(m)
    }
}
