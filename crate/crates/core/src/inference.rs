//! Beam search and end-to-end assertion generation.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use assertrag_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{assemble_input_ids, RetrievedTokens, Seq2SeqModel};
use crate::retriever::{ProbMode, RetrievalResult, RetrievalStrategy};
use crate::tokenizer::{TokenId, Tokenizer, EOS_ID};

pub const DEFAULT_BEAM: usize = 10;

/// Next-token log-probabilities given the tokens emitted so far.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Decoder of `model` over a fixed encoder memory.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel,
    memory: Tensor,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel, input: &[TokenId]) -> Result<Self> {
        Ok(Self { model, memory: model.memory(input)? })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.memory, prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-wise beam search without length normalization. Stops once `beam`
/// hypotheses have finished, `max_len` steps have run, or the best finished
/// score can no longer be beaten by any live prefix.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Result<Vec<BeamHypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config(format!("beam {beam} and max_len {max_len} must be positive")));
    }
    let mut live = vec![BeamHypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(live.len() * scorer.vocab_size());
        for h in &live {
            let lp = scorer.log_probs(&h.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                candidates.push(BeamHypothesis { tokens, log_prob: h.log_prob + l, finished: t as TokenId == EOS_ID });
            }
        }
        candidates.sort_by(rank);
        live.clear();
        for (i, c) in candidates.into_iter().enumerate() {
            if c.finished {
                if i < beam {
                    finished.push(c);
                }
            } else if live.len() < beam {
                live.push(c);
            }
            if live.len() == beam && i >= beam {
                break;
            }
        }
        finished.sort_by(rank);
        let best_finished = finished.first().map(|h| h.log_prob);
        let best_live = live.first().map(|h| h.log_prob);
        let settled = matches!((best_finished, best_live), (Some(f), Some(l)) if f >= l);
        if finished.len() >= beam || live.is_empty() || settled {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(rank);
    Ok(finished)
}

/// Argmax decoding with ties to the smaller token id.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<BeamHypothesis> {
    let mut h = BeamHypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let mut best = 0;
        for (t, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = t;
            }
        }
        h.tokens.push(best as TokenId);
        h.log_prob += lp[best];
        if best as TokenId == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Emitted tokens without the trailing EOS.
pub fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.split_last() {
        Some((&EOS_ID, rest)) => rest,
        _ => tokens,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub assertion: String,
    /// Top-k retrieval; the first entry conditioned the output.
    pub retrieved: Vec<RetrievalResult>,
    pub candidates: Vec<BeamHypothesis>,
}

/// Everything `generate` needs besides the query.
pub struct Generator<'a> {
    pub model: &'a Seq2SeqModel,
    pub tok: &'a Tokenizer,
    pub codebase: &'a Corpus,
    pub strategy: RetrievalStrategy<'a>,
    pub k: usize,
    pub beam: usize,
    pub prob_mode: ProbMode,
}

impl Generator<'_> {
    /// Input ids for `ft` conditioned on `top` (if any).
    pub fn input_ids(&self, ft: &str, top: Option<&RetrievalResult>) -> Vec<TokenId> {
        let max_len = self.model.config.max_input_len;
        let query = self.tok.encode(ft, max_len);
        match top {
            Some(r) => {
                let g = self.tok.encode(&r.pair.focal_test, max_len);
                let a = self.tok.encode(&r.pair.assertion, max_len);
                assemble_input_ids(&query, Some(RetrievedTokens { focal_test: &g, assertion: &a }), max_len)
            }
            None => assemble_input_ids(&query, None, max_len),
        }
    }

    pub fn retrieve(&self, ft: &str, salt: u64) -> Result<Vec<RetrievalResult>> {
        self.strategy.retrieve(self.codebase, self.tok, ft, self.k, None, self.prob_mode, salt)
    }

    /// Retrieve, condition on the top-1 TAP, beam-decode. `salt` only
    /// matters for random retrieval.
    pub fn generate(&self, ft: &str, salt: u64) -> Result<Generation> {
        let retrieved = self.retrieve(ft, salt)?;
        let input = self.input_ids(ft, retrieved.first());
        let scorer = ModelScorer::new(self.model, &input)?;
        let candidates = if self.beam == 1 {
            vec![greedy_decode(&scorer, self.model.config.max_output_len)?]
        } else {
            beam_search(&scorer, self.beam, self.model.config.max_output_len)?
        };
        let best = candidates
            .iter()
            .find(|h| h.finished)
            .or(candidates.first())
            .ok_or_else(|| Error::Model("beam search produced no hypotheses".into()))?;
        let assertion = self.tok.decode(strip_eos(&best.tokens))?;
        Ok(Generation { assertion, retrieved, candidates })
    }
}

/// One provenance line per prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_id: usize,
    pub retrieved_id: Option<usize>,
    pub score: Option<f64>,
    pub probability: Option<f64>,
}

impl Provenance {
    pub fn from_generation(query_id: usize, g: &Generation) -> Self {
        let top = g.retrieved.first();
        Self {
            query_id,
            retrieved_id: top.map(|r| r.pair.id),
            score: top.map(|r| r.score),
            probability: top.map(|r| r.probability),
        }
    }
}

/// Writes one prediction per line and, optionally, the provenance sidecar.
pub fn write_predictions(path: &Path, preds: &[String], provenance: Option<(&Path, &[Provenance])>) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        if p.contains('\n') {
            return Err(Error::Model(format!("prediction spans several lines: {p:?}")));
        }
        text.push_str(p);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))?;
    if let Some((side, records)) = provenance {
        let f = std::fs::File::create(side).map_err(|e| Error::file(side, e))?;
        let mut w = std::io::BufWriter::new(f);
        for r in records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
