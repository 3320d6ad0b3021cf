//! Pre-norm encoder-decoder transformer on the autodiff graph.
//!
//! The generator owns every parameter; the retriever is an independent copy
//! of the generator's token embedding and encoder stack, taken at training
//! start, whose final-layer `[CLS]` state is the sequence embedding.

mod input;

pub use input::{assemble_augmented_input, assemble_input_ids, RetrievedTokens};

use assertrag_nn::{BoundParams, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, CLS_ID, EOS_ID, PAD_ID};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub dropout: f64,
    /// Reuse the token embedding as the output projection.
    pub tie_output: bool,
}

impl ModelConfig {
    /// Default desk-scale shape: d=128, 2+2 layers, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_mult: 4,
            vocab_size,
            max_input_len: 512,
            max_output_len: 64,
            dropout: 0.1,
            tie_output: false,
        }
    }

    /// CodeT5-base-sized shape (d=768, 12+12 layers); far too slow for this
    /// engine but kept as a reference preset.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            enc_layers: 12,
            dec_layers: 12,
            heads: 12,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.max_input_len == 0 || self.max_output_len == 0 {
            return bad("maximum lengths must be at least 1".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ff_mult == 0 {
            return bad("layer counts and ff_mult must be positive".into());
        }
        if self.vocab_size <= EOS_ID as usize {
            return bad(format!("vocabulary of {} cannot hold the special tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Dropout switch for one forward pass. Evaluation mode never draws.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

fn init_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[1, d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, d]));
}

fn init_attention(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), d, d, rng);
    }
}

fn init_ff(store: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{name}.in"), d, d * mult, rng);
    init_linear(store, &format!("{name}.out"), d * mult, d, rng);
}

/// Parameter prefixes that make up an encoder (shared by generator and retriever).
pub const ENCODER_PREFIXES: [&str; 2] = ["tok_emb", "enc."];

/// Sinusoidal position table rows `0..len`, flattened.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = angle.sin();
            out[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    out
}

fn linear<'a>(g: &mut Graph<'a>, p: &BoundParams<'a>, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn norm<'a>(g: &mut Graph<'a>, p: &BoundParams<'a>, name: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{name}.g"))?;
    let beta = p.var(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

fn attention<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    name: &str,
    xq: Var,
    xkv: Var,
    causal: bool,
) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), xq)?;
    let k = linear(g, p, &format!("{name}.k"), xkv)?;
    let v = linear(g, p, &format!("{name}.v"), xkv)?;
    let (tq, tk) = (g.shape(q).0, g.shape(k).0);
    let dh = cfg.head_dim();
    let mask: Option<Vec<bool>> = causal.then(|| (0..tq * tk).map(|i| i % tk > i / tk).collect());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_t(qh, kh)?;
        let mut scores = g.scale(scores, (dh as f64).powf(-0.5));
        if let Some(mask) = &mask {
            scores = g.add_mask(scores, mask)?;
        }
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, p, &format!("{name}.o"), joined)
}

fn feed_forward<'a>(g: &mut Graph<'a>, p: &BoundParams<'a>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.in"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{name}.out"), h)
}

fn embed<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    ids: &[TokenId],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let emb = g.gather(p.var("tok_emb")?, &idx)?;
    let emb = g.scale(emb, (cfg.d_model as f64).sqrt());
    let pe = g.constant(ids.len(), cfg.d_model, positional_encoding(ids.len(), cfg.d_model))?;
    let x = g.add(emb, pe)?;
    Ok(drop.apply(g, x))
}

/// Runs the encoder stack named `enc.*`; returns final-layer states, one row
/// per input position.
pub fn encoder_forward<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    ids: &[TokenId],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    if ids.is_empty() || ids.len() > cfg.max_input_len {
        return Err(Error::Model(format!(
            "input length {} outside 1..={}",
            ids.len(),
            cfg.max_input_len
        )));
    }
    let mut x = embed(g, p, cfg, ids, drop)?;
    for l in 0..cfg.enc_layers {
        let h = norm(g, p, &format!("enc.{l}.ln1"), x)?;
        let h = attention(g, p, cfg, &format!("enc.{l}.attn"), h, h, false)?;
        let h = drop.apply(g, h);
        x = g.add(x, h)?;
        let h = norm(g, p, &format!("enc.{l}.ln2"), x)?;
        let h = feed_forward(g, p, &format!("enc.{l}.ff"), h)?;
        let h = drop.apply(g, h);
        x = g.add(x, h)?;
    }
    norm(g, p, "enc.ln_f", x)
}

/// Decoder over `dec_input` attending to `memory`; returns logits, one row
/// per decoder position.
pub fn decoder_forward<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    memory: Var,
    dec_input: &[TokenId],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let mut x = embed(g, p, cfg, dec_input, drop)?;
    for l in 0..cfg.dec_layers {
        let h = norm(g, p, &format!("dec.{l}.ln1"), x)?;
        let h = attention(g, p, cfg, &format!("dec.{l}.self"), h, h, true)?;
        let h = drop.apply(g, h);
        x = g.add(x, h)?;
        let h = norm(g, p, &format!("dec.{l}.ln2"), x)?;
        let h = attention(g, p, cfg, &format!("dec.{l}.cross"), h, memory, false)?;
        let h = drop.apply(g, h);
        x = g.add(x, h)?;
        let h = norm(g, p, &format!("dec.{l}.ln3"), x)?;
        let h = feed_forward(g, p, &format!("dec.{l}.ff"), h)?;
        let h = drop.apply(g, h);
        x = g.add(x, h)?;
    }
    let x = norm(g, p, "dec.ln_f", x)?;
    if cfg.tie_output {
        let logits = g.matmul_t(x, p.var("tok_emb")?)?;
        Ok(g.add_row(logits, p.var("out.b")?)?)
    } else {
        linear(g, p, "out", x)
    }
}

/// Decoder input for teacher forcing: PAD as the start symbol, then the
/// target shifted right by one.
pub fn shift_right(target: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(PAD_ID)
        .chain(target[..target.len().saturating_sub(1)].iter().copied())
        .collect()
}

/// Mean token cross-entropy of `target` (which should end with EOS) given
/// `input`, built inside `g`.
pub fn teacher_forced_loss_in<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    input: &[TokenId],
    target: &[TokenId],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::Model("empty target sequence".into()));
    }
    if target.len() > cfg.max_output_len {
        return Err(Error::Model(format!(
            "target length {} exceeds {}",
            target.len(),
            cfg.max_output_len
        )));
    }
    let memory = encoder_forward(g, p, cfg, input, drop)?;
    let logits = decoder_forward(g, p, cfg, memory, &shift_right(target), drop)?;
    let targets: Vec<Option<usize>> = target
        .iter()
        .map(|&t| (t != PAD_ID).then_some(t as usize))
        .collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Scales `cls` to unit Euclidean norm.
pub fn normalize_embedding(cls: &[f64]) -> Result<Vec<f64>> {
    let n = cls.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Model(format!("cannot normalize an embedding of norm {n}")));
    }
    Ok(cls.iter().map(|v| v / n).collect())
}

/// Generator parameters θ plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut params = ParamStore::new();
        params.insert("tok_emb", Tensor::randn(&[config.vocab_size, d], (d as f64).powf(-0.5), &mut rng));
        for l in 0..config.enc_layers {
            init_norm(&mut params, &format!("enc.{l}.ln1"), d);
            init_attention(&mut params, &format!("enc.{l}.attn"), d, &mut rng);
            init_norm(&mut params, &format!("enc.{l}.ln2"), d);
            init_ff(&mut params, &format!("enc.{l}.ff"), d, config.ff_mult, &mut rng);
        }
        init_norm(&mut params, "enc.ln_f", d);
        for l in 0..config.dec_layers {
            init_norm(&mut params, &format!("dec.{l}.ln1"), d);
            init_attention(&mut params, &format!("dec.{l}.self"), d, &mut rng);
            init_norm(&mut params, &format!("dec.{l}.ln2"), d);
            init_attention(&mut params, &format!("dec.{l}.cross"), d, &mut rng);
            init_norm(&mut params, &format!("dec.{l}.ln3"), d);
            init_ff(&mut params, &format!("dec.{l}.ff"), d, config.ff_mult, &mut rng);
        }
        init_norm(&mut params, "dec.ln_f", d);
        if config.tie_output {
            params.insert("out.b", Tensor::zeros(&[1, config.vocab_size]));
        } else {
            // small output weights keep the initial distribution near uniform
            params.insert("out.w", Tensor::randn(&[d, config.vocab_size], 0.1 * (d as f64).powf(-0.5), &mut rng));
            params.insert("out.b", Tensor::zeros(&[1, config.vocab_size]));
        }
        Ok(Self { config, params })
    }

    /// Evaluation-mode teacher-forced loss.
    pub fn teacher_forced_loss(&self, input: &[TokenId], target: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let loss = teacher_forced_loss_in(&mut g, &p, &self.config, input, target, &mut Dropout::eval())?;
        Ok(g.scalar(loss))
    }

    /// Final-layer encoder states for `ids`, which must start with CLS.
    pub fn encode_with_cls(&self, ids: &[TokenId]) -> Result<(Tensor, Vec<f64>)> {
        encode_with_cls(&self.params, &self.config, ids)
    }

    /// Encoder memory for decoding.
    pub fn memory(&self, input: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let h = encoder_forward(&mut g, &p, &self.config, input, &mut Dropout::eval())?;
        Ok(g.to_tensor(h))
    }

    /// Logits for every decoder position given encoder `memory` and the full
    /// decoder input (start symbol included).
    pub fn decoder_logits(&self, memory: &Tensor, dec_input: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let m = g.tensor(memory, false);
        let logits = decoder_forward(&mut g, &p, &self.config, m, dec_input, &mut Dropout::eval())?;
        Ok(g.to_tensor(logits))
    }

    /// Log-probabilities of the next token after `prefix` (start symbol excluded).
    pub fn next_log_probs(&self, memory: &Tensor, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(PAD_ID);
        dec_input.extend_from_slice(prefix);
        let logits = self.decoder_logits(memory, &dec_input)?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }

    pub fn encoder_params(&self) -> ParamStore {
        self.params.subset(&ENCODER_PREFIXES)
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn encode_with_cls(params: &ParamStore, cfg: &ModelConfig, ids: &[TokenId]) -> Result<(Tensor, Vec<f64>)> {
    if ids.first() != Some(&CLS_ID) {
        return Err(Error::Model("encoder input must start with [CLS]".into()));
    }
    let mut g = Graph::new();
    let p = g.bind(params, false);
    let h = encoder_forward(&mut g, &p, cfg, ids, &mut Dropout::eval())?;
    let h = g.to_tensor(h);
    let cls = h.row(0).to_vec();
    Ok((h, cls))
}

/// Retriever parameters φ: token embedding plus encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl RetrieverEncoder {
    /// Independent copy of the generator's encoder.
    pub fn from_generator(model: &Seq2SeqModel) -> Self {
        Self {
            config: model.config.clone(),
            params: model.encoder_params(),
        }
    }

    pub fn encode_with_cls(&self, ids: &[TokenId]) -> Result<(Tensor, Vec<f64>)> {
        encode_with_cls(&self.params, &self.config, ids)
    }

    /// Unit-norm `[CLS]` embedding of `ids`.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let (_, cls) = self.encode_with_cls(ids)?;
        normalize_embedding(&cls)
    }
}

/// Unit-norm `[CLS]` embedding built inside `g` (a `1 x d` node), so that
/// similarities stay differentiable with respect to φ.
pub fn cls_embedding_in<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams<'a>,
    cfg: &ModelConfig,
    ids: &[TokenId],
) -> Result<Var> {
    if ids.first() != Some(&CLS_ID) {
        return Err(Error::Model("encoder input must start with [CLS]".into()));
    }
    let h = encoder_forward(g, p, cfg, ids, &mut Dropout::eval())?;
    let cls = g.slice_rows(h, 0, 1)?;
    Ok(g.l2_normalize(cls)?)
}
