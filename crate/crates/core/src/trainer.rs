//! Joint generator/retriever training with early stopping on validation BLEU.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use assertrag_nn::{Adam, AdamConfig, BoundParams, GradAccumulator, Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestAssertPair};
use crate::error::{Error, Result};
use crate::inference::{greedy_decode, strip_eos, Generator, ModelScorer};
use crate::metrics::corpus_bleu;
use crate::model::{
    assemble_input_ids, cls_embedding_in, teacher_forced_loss_in, Dropout, RetrievedTokens, RetrieverEncoder,
    Seq2SeqModel,
};
use crate::retriever::{mix_seed, DenseIndex, ProbMode, RetrievalResult, RetrievalStrategy};
use crate::tokenizer::{TokenId, Tokenizer, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverMode {
    Joint,
    FrozenPretrained,
    FrozenFinetuned,
    Jaccard,
    Random,
    None,
}

impl RetrieverMode {
    pub const ALL: [RetrieverMode; 6] = [
        RetrieverMode::Joint,
        RetrieverMode::FrozenPretrained,
        RetrieverMode::FrozenFinetuned,
        RetrieverMode::Jaccard,
        RetrieverMode::Random,
        RetrieverMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrieverMode::Joint => "joint",
            RetrieverMode::FrozenPretrained => "frozen-pretrained",
            RetrieverMode::FrozenFinetuned => "frozen-finetuned",
            RetrieverMode::Jaccard => "jaccard",
            RetrieverMode::Random => "random",
            RetrieverMode::None => "none",
        }
    }

    /// Modes that search a dense index with a retriever encoder.
    pub fn is_dense(self) -> bool {
        matches!(self, RetrieverMode::Joint | RetrieverMode::FrozenPretrained | RetrieverMode::FrozenFinetuned)
    }
}

impl fmt::Display for RetrieverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetrieverMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown retriever mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for φ in joint mode; `None` reuses `lr`.
    #[serde(default)]
    pub retriever_lr: Option<f64>,
    pub max_epochs: usize,
    pub k: usize,
    pub patience: usize,
    pub mode: RetrieverMode,
    pub prob_mode: ProbMode,
    /// Rebuild the dense index every this many batches; `None` means once
    /// per epoch.
    pub refresh_batches: Option<usize>,
    pub seed: u64,
    pub max_input_len: usize,
    pub max_output_len: usize,
    /// Beam width for validation decoding (1 = greedy).
    pub valid_beam: usize,
    /// Beam width for final generation.
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 5e-5,
            retriever_lr: None,
            max_epochs: 20,
            k: 5,
            patience: 3,
            mode: RetrieverMode::Joint,
            prob_mode: ProbMode::default(),
            refresh_batches: None,
            seed: 0,
            max_input_len: 512,
            max_output_len: 64,
            valid_beam: 1,
            beam: crate::inference::DEFAULT_BEAM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        for lr in std::iter::once(self.lr).chain(self.retriever_lr) {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        if self.max_input_len == 0 || self.max_output_len < 2 {
            return bad("input length must be >= 1 and output length >= 2".into());
        }
        if self.valid_beam == 0 || self.beam == 0 {
            return bad("beam widths must be positive".into());
        }
        if self.refresh_batches == Some(0) {
            return bad("refresh period must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_bleu: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the best validation BLEU.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingHistory {
    /// History with wall-clock times zeroed, for replay comparisons.
    pub fn without_timing(&self) -> TrainingHistory {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.seconds = 0.0;
        }
        h
    }

    /// One line per epoch: `epoch loss valid_bleu seconds`.
    pub fn log_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| format!("{}\t{:.6}\t{:.6}\t{:.3}\n", e.epoch, e.loss, e.valid_bleu, e.seconds))
            .collect()
    }
}

/// Patience bookkeeping: strict improvement resets the counter.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    /// Records an epoch's score; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }
}

/// Attaches a softmax or linear normalization to a `1 x k` score node.
pub fn probs_in<'a>(g: &mut Graph<'a>, scores: Var, mode: ProbMode) -> Result<Var> {
    match mode {
        ProbMode::Softmax { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Retrieval(format!("temperature {temperature} must be positive")));
            }
            let s = g.scale(scores, 1.0 / temperature);
            Ok(g.softmax(s)?)
        }
        ProbMode::Linear => {
            if g.value(scores).iter().any(|&s| s < 0.0) {
                return Err(Error::Retrieval("linear probabilities need non-negative scores".into()));
            }
            let z = g.sum(scores);
            if !(g.scalar(z) > 0.0) {
                return Err(Error::Retrieval("linear probabilities need a positive score sum".into()));
            }
            Ok(g.div_scalar(scores, z)?)
        }
    }
}

/// Retrieval probabilities recomputed from live query and key embeddings,
/// so the result is differentiable in φ. Returns `(probs 1 x k, query 1 x d)`.
pub fn live_probs_in<'a>(
    g: &mut Graph<'a>,
    phi: &BoundParams<'a>,
    cfg: &crate::model::ModelConfig,
    query_ids: &[TokenId],
    key_ids: &[&[TokenId]],
    mode: ProbMode,
) -> Result<Var> {
    let q = cls_embedding_in(g, phi, cfg, query_ids)?;
    let keys = key_ids
        .iter()
        .map(|ids| cls_embedding_in(g, phi, cfg, ids))
        .collect::<Result<Vec<_>>>()?;
    let keys = if keys.len() == 1 { keys[0] } else { g.concat_rows(&keys)? };
    let scores = g.matmul_t(q, keys)?;
    probs_in(g, scores, mode)
}

/// `sum_j P_j * L_ce(target | query (+) TAP_j)`; with nothing retrieved this
/// is the plain teacher-forced loss on `[CLS] query`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_in<'a>(
    g: &mut Graph<'a>,
    theta: &BoundParams<'a>,
    cfg: &crate::model::ModelConfig,
    query: &[TokenId],
    target: &[TokenId],
    retrieved: &[RetrievedTokens<'_>],
    probs: Option<Var>,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    if retrieved.is_empty() {
        let input = assemble_input_ids(query, None, cfg.max_input_len);
        return teacher_forced_loss_in(g, theta, cfg, &input, target, drop);
    }
    let probs = probs.ok_or_else(|| Error::Model("retrieved TAPs without probabilities".into()))?;
    if g.shape(probs) != (1, retrieved.len()) {
        return Err(Error::Model(format!("{:?} probabilities for {} TAPs", g.shape(probs), retrieved.len())));
    }
    let mut losses = Vec::with_capacity(retrieved.len());
    for r in retrieved {
        let input = assemble_input_ids(query, Some(*r), cfg.max_input_len);
        losses.push(teacher_forced_loss_in(g, theta, cfg, &input, target, drop)?);
    }
    let losses = if losses.len() == 1 { losses[0] } else { g.concat_cols(&losses)? };
    let weighted = g.mul(losses, probs)?;
    Ok(g.sum(weighted))
}

/// Token ids for one TAP, computed once per run.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub focal_test: Vec<TokenId>,
    pub assertion: Vec<TokenId>,
    /// Assertion truncated to the output budget, EOS appended.
    pub target: Vec<TokenId>,
    /// `[CLS] focal_test` as seen by the retriever.
    pub query: Vec<TokenId>,
}

impl EncodedPair {
    pub fn new(tok: &Tokenizer, p: &TestAssertPair, max_input_len: usize, max_output_len: usize) -> Self {
        let focal_test = tok.encode(&p.focal_test, max_input_len);
        let mut target = tok.encode(&p.assertion, max_output_len - 1);
        target.push(EOS_ID);
        Self {
            query: assemble_input_ids(&focal_test, None, max_input_len),
            assertion: tok.encode(&p.assertion, max_input_len),
            focal_test,
            target,
        }
    }

    pub fn as_retrieved(&self) -> RetrievedTokens<'_> {
        RetrievedTokens { focal_test: &self.focal_test, assertion: &self.assertion }
    }
}

/// Evaluation-mode joint loss for `query` over `topk`. With a retriever the
/// probabilities are recomputed from live embeddings; otherwise the
/// attached probabilities are used.
pub fn joint_loss(
    model: &Seq2SeqModel,
    retriever: Option<&RetrieverEncoder>,
    tok: &Tokenizer,
    query: &TestAssertPair,
    topk: &[RetrievalResult],
    mode: ProbMode,
) -> Result<f64> {
    let cfg = &model.config;
    let enc = |p: &TestAssertPair| EncodedPair::new(tok, p, cfg.max_input_len, cfg.max_output_len);
    let q = enc(query);
    if q.target.len() < 2 {
        return Err(Error::Model(format!("pair {} has an empty assertion", query.id)));
    }
    let keys: Vec<EncodedPair> = topk.iter().map(|r| enc(&r.pair)).collect();
    let retrieved: Vec<RetrievedTokens> = keys.iter().map(EncodedPair::as_retrieved).collect();
    let mut g = Graph::new();
    let theta = g.bind(&model.params, false);
    let probs = match (retriever, topk.is_empty()) {
        (_, true) => None,
        (Some(r), false) => {
            let phi = g.bind(&r.params, false);
            let key_ids: Vec<&[TokenId]> = keys.iter().map(|k| k.query.as_slice()).collect();
            Some(live_probs_in(&mut g, &phi, &r.config, &q.query, &key_ids, mode)?)
        }
        (None, false) => Some(g.constant(1, topk.len(), topk.iter().map(|r| r.probability).collect())?),
    };
    let loss = joint_loss_in(&mut g, &theta, cfg, &q.focal_test, &q.target, &retrieved, probs, &mut Dropout::eval())?;
    Ok(g.scalar(loss))
}

/// Model state at the end of some epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub model: Seq2SeqModel,
    pub retriever: Option<RetrieverEncoder>,
    pub epoch: usize,
}

pub struct TrainOutcome {
    pub best: TrainedState,
    pub last: TrainedState,
    pub history: TrainingHistory,
}

pub struct TrainData<'a> {
    pub train: &'a Corpus,
    /// Retrieval corpus; ids must coincide with `train` for self-exclusion.
    pub codebase: &'a Corpus,
    pub valid: &'a Corpus,
    pub tok: &'a Tokenizer,
}

/// What the per-epoch hook sees.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a Seq2SeqModel,
    pub retriever: Option<&'a RetrieverEncoder>,
    pub index: Option<&'a DenseIndex>,
    pub data: &'a TrainData<'a>,
    pub config: &'a TrainConfig,
}

impl EpochView<'_> {
    /// Generator over the codebase in this epoch's state.
    pub fn generator(&self, beam: usize) -> Generator<'_> {
        Generator {
            model: self.model,
            tok: self.data.tok,
            codebase: self.data.codebase,
            strategy: strategy(self.config, self.retriever, self.index),
            k: self.config.k,
            beam,
            prob_mode: self.config.prob_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

pub fn strategy<'a>(
    cfg: &TrainConfig,
    retriever: Option<&'a RetrieverEncoder>,
    index: Option<&'a DenseIndex>,
) -> RetrievalStrategy<'a> {
    match (cfg.mode, retriever, index) {
        (RetrieverMode::None, ..) => RetrievalStrategy::None,
        (RetrieverMode::Jaccard, ..) => RetrievalStrategy::Jaccard,
        (RetrieverMode::Random, ..) => RetrievalStrategy::Random { seed: cfg.seed },
        (_, Some(encoder), Some(index)) => RetrievalStrategy::Dense { index, encoder },
        // dense mode without state: nothing to search
        _ => RetrievalStrategy::None,
    }
}

/// Decodes every validation pair and returns corpus BLEU.
pub fn validation_bleu(generator: &Generator<'_>, valid: &Corpus) -> Result<f64> {
    let mut preds = Vec::with_capacity(valid.len());
    for p in valid.pairs() {
        let retrieved = generator.retrieve(&p.focal_test, p.id as u64)?;
        let input = generator.input_ids(&p.focal_test, retrieved.first());
        let scorer = ModelScorer::new(generator.model, &input)?;
        let hyp = if generator.beam == 1 {
            greedy_decode(&scorer, generator.model.config.max_output_len)?
        } else {
            let mut beams = crate::inference::beam_search(&scorer, generator.beam, generator.model.config.max_output_len)?;
            beams.swap_remove(0)
        };
        preds.push(generator.tok.decode(strip_eos(&hyp.tokens))?);
    }
    Ok(corpus_bleu(preds.iter().map(String::as_str).zip(valid.pairs().iter().map(|p| p.assertion.as_str()))))
}

struct Trainer<'a> {
    data: &'a TrainData<'a>,
    cfg: &'a TrainConfig,
    train_enc: Vec<EncodedPair>,
    codebase_enc: Vec<EncodedPair>,
    model: Seq2SeqModel,
    retriever: Option<RetrieverEncoder>,
    index: Option<DenseIndex>,
    index_version: u64,
    theta_opt: Adam,
    phi_opt: Option<Adam>,
    theta_acc: GradAccumulator,
    phi_acc: Option<GradAccumulator>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    fn refresh_index(&mut self) -> Result<()> {
        if let Some(r) = &self.retriever {
            self.index_version += 1;
            self.index = Some(DenseIndex::build(self.data.codebase, r, self.data.tok, self.index_version)?);
        }
        Ok(())
    }

    fn sample_loss(&mut self, sample: usize, epoch: usize) -> Result<f64> {
        let cfg = self.cfg;
        let pair = &self.data.train.pairs()[sample];
        let q = &self.train_enc[sample];
        let mcfg = &self.model.config;
        let mut g = Graph::new();
        let theta = g.bind(&self.model.params, true);
        let joint = cfg.mode == RetrieverMode::Joint;
        let phi = match (&self.retriever, joint) {
            (Some(r), true) => Some(g.bind(&r.params, true)),
            _ => None,
        };
        let mut probs = None;
        let mut hits: Vec<usize> = Vec::new();
        match (cfg.mode, &phi) {
            (RetrieverMode::None, _) => {}
            (RetrieverMode::Joint, Some(phi)) => {
                let index = self.index.as_ref().ok_or_else(|| Error::Retrieval("index not built".into()))?;
                let qv = cls_embedding_in(&mut g, phi, mcfg, &q.query)?;
                let found = index.search(g.value(qv), cfg.k, Some(pair.id))?;
                hits = found.iter().map(|h| h.0).collect();
                let keys = hits
                    .iter()
                    .map(|&id| cls_embedding_in(&mut g, phi, mcfg, &self.codebase_enc[id].query))
                    .collect::<Result<Vec<_>>>()?;
                let keys = if keys.len() == 1 { keys[0] } else { g.concat_rows(&keys)? };
                let scores = g.matmul_t(qv, keys)?;
                probs = Some(probs_in(&mut g, scores, cfg.prob_mode)?);
            }
            _ => {
                let salt = (epoch as u64) << 32 | pair.id as u64;
                let strat = strategy(cfg, self.retriever.as_ref(), self.index.as_ref());
                let found = strat.retrieve(
                    self.data.codebase,
                    self.data.tok,
                    &pair.focal_test,
                    cfg.k,
                    Some(pair.id),
                    cfg.prob_mode,
                    salt,
                )?;
                if found.is_empty() {
                    return Err(Error::Retrieval(format!("mode {} retrieved nothing", cfg.mode)));
                }
                hits = found.iter().map(|r| r.pair.id).collect();
                probs = Some(g.constant(1, found.len(), found.iter().map(|r| r.probability).collect())?);
            }
        }
        let retrieved: Vec<RetrievedTokens> = hits.iter().map(|&id| self.codebase_enc[id].as_retrieved()).collect();
        let mut drop = Dropout::train(mcfg.dropout, &mut self.rng);
        let loss = joint_loss_in(&mut g, &theta, mcfg, &q.focal_test, &q.target, &retrieved, probs, &mut drop)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training { epoch, batch: 0, reason: format!("non-finite loss {value} on pair {}", pair.id) });
        }
        let grads = g.backward(loss)?;
        self.theta_acc.add(&theta, &grads, 1.0);
        if let (Some(acc), Some(phi)) = (&mut self.phi_acc, &phi) {
            acc.add(phi, &grads, 1.0);
        }
        Ok(value)
    }

    fn step(&mut self, scale: f64) -> Result<()> {
        let scaled = |acc: &GradAccumulator| -> Vec<Vec<f64>> {
            acc.grads().iter().map(|g| g.iter().map(|v| v * scale).collect()).collect()
        };
        let grads = scaled(&self.theta_acc);
        self.theta_opt.step(&mut self.model.params, &grads)?;
        self.theta_acc.clear();
        if let (Some(acc), Some(opt), Some(r)) = (&mut self.phi_acc, &mut self.phi_opt, &mut self.retriever) {
            let grads = scaled(acc);
            opt.step(&mut r.params, &grads)?;
            acc.clear();
        }
        Ok(())
    }

    fn epoch(&mut self, epoch: usize) -> Result<f64> {
        let n = self.data.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            if self.cfg.mode == RetrieverMode::Joint {
                if let Some(period) = self.cfg.refresh_batches {
                    if b > 0 && b % period == 0 {
                        self.refresh_index()?;
                    }
                }
            }
            for &i in batch {
                total += self.sample_loss(i, epoch).map_err(|e| match e {
                    Error::Training { reason, .. } => Error::Training { epoch, batch: b + 1, reason },
                    other => other,
                })?;
            }
            self.step(1.0 / batch.len() as f64).map_err(|e| Error::Training {
                epoch,
                batch: b + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(total / n as f64)
    }

    fn state(&self, epoch: usize) -> TrainedState {
        TrainedState { model: self.model.clone(), retriever: self.retriever.clone(), epoch }
    }
}

/// Trains `model` under `cfg.mode`. `phi` overrides the retriever's initial
/// encoder (required for frozen-finetuned); other dense modes copy the
/// generator's encoder. The hook runs after every epoch and may stop
/// training early.
pub fn train(
    data: &TrainData<'_>,
    model: Seq2SeqModel,
    phi: Option<RetrieverEncoder>,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(&EpochView<'_>) -> Result<EpochControl>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    if cfg.max_input_len > model.config.max_input_len || cfg.max_output_len > model.config.max_output_len {
        return Err(Error::Config(format!(
            "lengths {}/{} exceed the model's {}/{}",
            cfg.max_input_len, cfg.max_output_len, model.config.max_input_len, model.config.max_output_len
        )));
    }
    let retriever = match cfg.mode {
        RetrieverMode::Joint | RetrieverMode::FrozenPretrained => {
            Some(phi.unwrap_or_else(|| RetrieverEncoder::from_generator(&model)))
        }
        RetrieverMode::FrozenFinetuned => Some(phi.ok_or_else(|| {
            Error::Config("frozen-finetuned mode needs an encoder from a generator-only run".into())
        })?),
        _ => None,
    };
    let enc = |c: &Corpus| -> Vec<EncodedPair> {
        c.pairs()
            .iter()
            .map(|p| EncodedPair::new(data.tok, p, cfg.max_input_len, cfg.max_output_len))
            .collect()
    };
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let joint = cfg.mode == RetrieverMode::Joint;
    let mut t = Trainer {
        data,
        cfg,
        train_enc: enc(data.train),
        codebase_enc: enc(data.codebase),
        theta_opt: Adam::new(&model.params, adam),
        theta_acc: GradAccumulator::new(&model.params),
        phi_opt: retriever
            .as_ref()
            .filter(|_| joint)
            .map(|r| Adam::new(&r.params, AdamConfig { lr: cfg.retriever_lr.unwrap_or(cfg.lr), ..adam })),
        phi_acc: retriever.as_ref().filter(|_| joint).map(|r| GradAccumulator::new(&r.params)),
        model,
        retriever,
        index: None,
        index_version: 0,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EA1)),
    };
    t.refresh_index()?;

    let mut history = TrainingHistory::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = t.state(0);
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let loss = t.epoch(epoch)?;
        if joint {
            t.refresh_index()?;
        }
        let view_strategy = strategy(cfg, t.retriever.as_ref(), t.index.as_ref());
        let generator = Generator {
            model: &t.model,
            tok: data.tok,
            codebase: data.codebase,
            strategy: view_strategy,
            k: cfg.k,
            beam: cfg.valid_beam,
            prob_mode: cfg.prob_mode,
        };
        let valid_bleu = validation_bleu(&generator, data.valid)?;
        let record = EpochRecord { epoch, loss, valid_bleu, seconds: started.elapsed().as_secs_f64() };
        let (improved, stop) = stopper.observe(epoch, valid_bleu);
        if improved {
            best = t.state(epoch);
        }
        let control = hook(&EpochView {
            record: &record,
            model: &t.model,
            retriever: t.retriever.as_ref(),
            index: t.index.as_ref(),
            data,
            config: cfg,
        })?;
        history.epochs.push(record);
        if stop || control == EpochControl::Stop {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    let last = t.state(history.epochs.len());
    Ok(TrainOutcome { best, last, history })
}

/// Retriever for the frozen-finetuned ablation: the encoder of a generator
/// trained without retrieval.
pub fn finetuned_retriever(data: &TrainData<'_>, model: Seq2SeqModel, cfg: &TrainConfig) -> Result<RetrieverEncoder> {
    let cfg = TrainConfig { mode: RetrieverMode::None, ..cfg.clone() };
    let out = train(data, model, None, &cfg, &mut |_| Ok(EpochControl::Continue))?;
    Ok(RetrieverEncoder::from_generator(&out.best.model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_paper_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.lr, c.max_epochs, c.k, c.patience), (8, 5e-5, 20, 5, 3));
        assert_eq!((c.max_input_len, c.max_output_len, c.beam), (512, 64, 10));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { k: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..c }.validate().is_err());
    }

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopper::new(3);
        let stops: Vec<bool> = [10.0, 12.0, 12.0, 12.0, 12.0]
            .iter()
            .enumerate()
            .map(|(i, &b)| s.observe(i + 1, b).1)
            .collect();
        assert_eq!(stops, vec![false, false, false, false, true]);
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RetrieverMode::ALL {
            assert_eq!(m.name().parse::<RetrieverMode>().unwrap(), m);
        }
        assert!("dense".parse::<RetrieverMode>().is_err());
    }
}
