//! Train-then-test drivers shared by the `ablate` command and the
//! acceptance runs.

use std::fmt::Write as _;

use crate::corpus::Corpus;
use crate::error::Result;
use crate::inference::{Generator, Provenance};
use crate::metrics::{evaluate, CodeBleuWeights, MetricsReport};
use crate::model::{ModelConfig, RetrieverEncoder, Seq2SeqModel};
use crate::retriever::DenseIndex;
use crate::tokenizer::Tokenizer;
use crate::trainer::{finetuned_retriever, strategy, train, EpochControl, RetrieverMode, TrainConfig, TrainData, TrainOutcome, TrainingHistory};

pub struct Splits<'a> {
    pub train: &'a Corpus,
    pub valid: &'a Corpus,
    pub test: &'a Corpus,
    pub tok: &'a Tokenizer,
}

pub struct ModeResult {
    pub mode: RetrieverMode,
    pub report: MetricsReport,
    pub predictions: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub history: TrainingHistory,
}

impl ModeResult {
    /// Test queries whose conditioning TAP was `expected(query_id)`.
    pub fn top1_hits(&self, expected: impl Fn(usize) -> Option<usize>) -> usize {
        self.provenance
            .iter()
            .filter(|p| p.retrieved_id.is_some() && p.retrieved_id == expected(p.query_id))
            .count()
    }
}

/// Trains one retriever mode from a fresh `seed`-initialized model.
pub fn train_mode(splits: &Splits<'_>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = TrainData { train: splits.train, codebase: splits.train, valid: splits.valid, tok: splits.tok };
    let model = Seq2SeqModel::new(model_cfg.clone(), cfg.seed)?;
    let phi = match cfg.mode {
        RetrieverMode::FrozenFinetuned => Some(finetuned_retriever(&data, model.clone(), cfg)?),
        _ => None,
    };
    train(&data, model, phi, cfg, &mut |_| Ok(EpochControl::Continue))
}

/// Generates for every test query with `model`/`retriever` under `cfg`.
pub fn predict(
    splits: &Splits<'_>,
    model: &Seq2SeqModel,
    retriever: Option<&RetrieverEncoder>,
    cfg: &TrainConfig,
) -> Result<(Vec<String>, Vec<Provenance>)> {
    let index = match (cfg.mode.is_dense(), retriever) {
        (true, Some(r)) => Some(DenseIndex::build(splits.train, r, splits.tok, 0)?),
        _ => None,
    };
    let generator = Generator {
        model,
        tok: splits.tok,
        codebase: splits.train,
        strategy: strategy(cfg, retriever, index.as_ref()),
        k: cfg.k,
        beam: cfg.beam,
        prob_mode: cfg.prob_mode,
    };
    let mut preds = Vec::with_capacity(splits.test.len());
    let mut prov = Vec::with_capacity(splits.test.len());
    for q in splits.test.pairs() {
        let g = generator.generate(&q.focal_test, q.id as u64)?;
        prov.push(Provenance::from_generation(q.id, &g));
        preds.push(g.assertion);
    }
    Ok((preds, prov))
}

pub fn run_mode(splits: &Splits<'_>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<ModeResult> {
    let out = train_mode(splits, model_cfg, cfg)?;
    let (predictions, provenance) = predict(splits, &out.best.model, out.best.retriever.as_ref(), cfg)?;
    let report = evaluate(&predictions, splits.test, CodeBleuWeights::default())?;
    Ok(ModeResult { mode: cfg.mode, report, predictions, provenance, history: out.history })
}

/// One row per mode: exact match, BLEU, CodeBLEU.
pub fn ablation_table(results: &[ModeResult]) -> String {
    let mut out = String::from("Retriever\tAccuracy\tBLEU\tCodeBLEU\n");
    for r in results {
        let _ = writeln!(
            out,
            "{}\t{:.2}% ({}/{})\t{:.2}\t{:.2}",
            r.mode,
            100.0 * r.report.accuracy,
            r.report.correct,
            r.report.n,
            100.0 * r.report.bleu,
            100.0 * r.report.codebleu
        );
    }
    out
}
