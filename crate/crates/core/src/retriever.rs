//! Dense TAP index, retrieval probabilities and the sparse/random baselines.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestAssertPair};
use crate::error::{Error, Result};
use crate::model::{assemble_input_ids, RetrieverEncoder};
use crate::tokenizer::{TokenId, Tokenizer};

const INDEX_MAGIC: &[u8; 8] = b"ARIDX001";

/// How similarity scores become retrieval probabilities over the top-k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbMode {
    Softmax { temperature: f64 },
    /// `s_j / sum(s)`; only defined when the scores sum to a positive value.
    Linear,
}

impl Default for ProbMode {
    fn default() -> Self {
        ProbMode::Softmax { temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub pair: TestAssertPair,
    pub score: f64,
    pub probability: f64,
}

/// `[CLS] ft` token ids as fed to the retriever encoder.
pub fn query_ids(tok: &Tokenizer, ft: &str, max_len: usize) -> Vec<TokenId> {
    assemble_input_ids(&tok.encode(ft, max_len), None, max_len)
}

pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn retrieval_probs(scores: &[f64], mode: ProbMode) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Retrieval("no scores to normalize".into()));
    }
    match mode {
        ProbMode::Softmax { temperature } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Retrieval(format!("temperature {temperature} must be positive")));
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            Ok(e.into_iter().map(|v| v / z).collect())
        }
        ProbMode::Linear => {
            let z: f64 = scores.iter().sum();
            if !(z > 0.0) || scores.iter().any(|s| *s < 0.0) {
                return Err(Error::Retrieval(format!("linear probabilities need positive scores (sum {z})")));
            }
            Ok(scores.iter().map(|s| s / z).collect())
        }
    }
}

/// Exhaustive unit-vector index over a codebase.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    encoder_version: u64,
    ids: Vec<usize>,
    vectors: Vec<f64>,
}

impl DenseIndex {
    pub fn from_vectors(dim: usize, encoder_version: u64, ids: Vec<usize>, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 || vectors.len() != ids.len() * dim {
            return Err(Error::Retrieval(format!(
                "{} values do not form {} vectors of dimension {dim}",
                vectors.len(),
                ids.len()
            )));
        }
        for (i, v) in vectors.chunks(dim).enumerate() {
            let n = similarity(v, v).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Retrieval(format!("vector for pair {} has norm {n}", ids[i])));
            }
        }
        Ok(Self { dim, encoder_version, ids, vectors })
    }

    /// Embeds every codebase focal-test with `encoder`.
    pub fn build(codebase: &Corpus, encoder: &RetrieverEncoder, tok: &Tokenizer, encoder_version: u64) -> Result<Self> {
        if codebase.is_empty() {
            return Err(Error::Retrieval("cannot index an empty codebase".into()));
        }
        let max_len = encoder.config.max_input_len;
        let mut vectors = Vec::with_capacity(codebase.len() * encoder.config.d_model);
        for p in codebase.pairs() {
            let v = encoder
                .embed(&query_ids(tok, &p.focal_test, max_len))
                .map_err(|e| Error::Retrieval(format!("pair {}: {e}", p.id)))?;
            vectors.extend(v);
        }
        let ids = codebase.pairs().iter().map(|p| p.id).collect();
        Self::from_vectors(encoder.config.d_model, encoder_version, ids, vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_version(&self) -> u64 {
        self.encoder_version
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// Top-k `(pair id, score)` by score, ties to the smaller id.
    pub fn search(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Retrieval(format!("query dimension {} != index dimension {}", query.len(), self.dim)));
        }
        let mut scored: Vec<(usize, f64)> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| Some(id) != exclude)
            .map(|(row, &id)| (id, similarity(query, self.vector(row))))
            .collect();
        top_k(&mut scored, k)?;
        Ok(scored)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        for v in [self.ids.len() as u64, self.dim as u64, self.encoder_version] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        for &id in &self.ids {
            w.write_all(&(id as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Retrieval("not an index file".into()));
        }
        let mut word = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let (n, dim, version) = (word()? as usize, word()? as usize, word()?);
        let vectors = (0..n * dim).map(|_| word().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let ids = (0..n).map(|_| word().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        Self::from_vectors(dim, version, ids, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn top_k(scored: &mut Vec<(usize, f64)>, k: usize) -> Result<()> {
    if k == 0 || k > scored.len() {
        return Err(Error::Retrieval(format!("k={k} but {} candidates are available", scored.len())));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(())
}

fn attach(codebase: &Corpus, hits: Vec<(usize, f64)>, probs: Vec<f64>) -> Result<Vec<RetrievalResult>> {
    hits.into_iter()
        .zip(probs)
        .map(|((id, score), probability)| {
            let pair = codebase
                .get(id)
                .ok_or_else(|| Error::Retrieval(format!("index refers to pair {id} outside the codebase")))?
                .clone();
            Ok(RetrievalResult { pair, score, probability })
        })
        .collect()
}

/// Embeds `query_ft`, scans the index and attaches probabilities.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_topk(
    index: &DenseIndex,
    codebase: &Corpus,
    encoder: &RetrieverEncoder,
    tok: &Tokenizer,
    query_ft: &str,
    k: usize,
    exclude: Option<usize>,
    mode: ProbMode,
) -> Result<Vec<RetrievalResult>> {
    let q = encoder.embed(&query_ids(tok, query_ft, encoder.config.max_input_len))?;
    let hits = index.search(&q, k, exclude)?;
    let scores: Vec<f64> = hits.iter().map(|h| h.1).collect();
    attach(codebase, hits, retrieval_probs(&scores, mode)?)
}

fn token_set(text: &str) -> BTreeSet<&str> {
    text.split_whitespace().collect()
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Sparse baseline: Jaccard over whitespace-token sets, uniform probabilities.
pub fn jaccard_retrieve(codebase: &Corpus, query_ft: &str, k: usize, exclude: Option<usize>) -> Result<Vec<RetrievalResult>> {
    let q = token_set(query_ft);
    if q.is_empty() {
        return Err(Error::Retrieval("query has no tokens".into()));
    }
    let mut scored: Vec<(usize, f64)> = codebase
        .pairs()
        .iter()
        .filter(|p| Some(p.id) != exclude)
        .map(|p| {
            let s = token_set(&p.focal_test);
            let union = q.union(&s).count();
            (p.id, q.intersection(&s).count() as f64 / union as f64)
        })
        .collect();
    top_k(&mut scored, k)?;
    attach(codebase, scored, vec![1.0 / k as f64; k])
}

/// `k` distinct pairs drawn uniformly without replacement.
pub fn random_retrieve(codebase: &Corpus, k: usize, exclude: Option<usize>, seed: u64) -> Result<Vec<RetrievalResult>> {
    let pool: Vec<usize> = codebase.pairs().iter().map(|p| p.id).filter(|&id| Some(id) != exclude).collect();
    if k == 0 || k > pool.len() {
        return Err(Error::Retrieval(format!("k={k} but {} candidates are available", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| (pool[i], 0.0))
        .collect();
    attach(codebase, hits, vec![1.0 / k as f64; k])
}

/// Mixes a base seed with a per-call salt (query id, epoch) so random
/// retrieval differs per query yet replays exactly.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where retrieved TAPs come from.
#[derive(Debug, Clone, Copy)]
pub enum RetrievalStrategy<'a> {
    None,
    Dense { index: &'a DenseIndex, encoder: &'a RetrieverEncoder },
    Jaccard,
    Random { seed: u64 },
}

impl RetrievalStrategy<'_> {
    /// Top-k for `query_ft`; empty for [`RetrievalStrategy::None`].
    #[allow(clippy::too_many_arguments)]
    pub fn retrieve(
        &self,
        codebase: &Corpus,
        tok: &Tokenizer,
        query_ft: &str,
        k: usize,
        exclude: Option<usize>,
        mode: ProbMode,
        salt: u64,
    ) -> Result<Vec<RetrievalResult>> {
        match *self {
            RetrievalStrategy::None => Ok(Vec::new()),
            RetrievalStrategy::Dense { index, encoder } => {
                retrieve_topk(index, codebase, encoder, tok, query_ft, k, exclude, mode)
            }
            RetrievalStrategy::Jaccard => jaccard_retrieve(codebase, query_ft, k, exclude),
            RetrievalStrategy::Random { seed } => random_retrieve(codebase, k, exclude, mix_seed(seed, salt)),
        }
    }
}
