//! Test-assert pair corpora: ingestion, splitting, and assertion-type
//! classification.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A focal-test (focal method plus test prefix) and its gold assertion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestAssertPair {
    pub id: usize,
    pub focal_test: String,
    pub assertion: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    name: String,
    pairs: Vec<TestAssertPair>,
}

impl Corpus {
    /// Builds a corpus from `(focal_test, assertion)` texts, assigning ids
    /// `0..n` in order.
    pub fn from_texts<I, S, T>(name: impl Into<String>, texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let pairs = texts
            .into_iter()
            .enumerate()
            .map(|(id, (ft, a))| TestAssertPair {
                id,
                focal_test: ft.into(),
                assertion: a.into(),
            })
            .collect::<Vec<_>>();
        let corpus = Corpus {
            name: name.into(),
            pairs,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Ingestion(format!("corpus `{}` is empty", self.name)));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.id != i {
                return Err(Error::Ingestion(format!("pair at position {i} has id {}", p.id)));
            }
            if p.focal_test.trim().is_empty() || p.assertion.trim().is_empty() {
                return Err(Error::Ingestion(format!("pair {i} has an empty side")));
            }
            if p.assertion.contains('\n') {
                return Err(Error::Ingestion(format!("assertion of pair {i} spans several lines")));
            }
        }
        Ok(())
    }

    /// Reads the parallel `<split>.source` / `<split>.target` files.
    pub fn load(source_path: &Path, target_path: &Path, name: impl Into<String>) -> Result<Self> {
        let source = fs::read_to_string(source_path).map_err(|e| Error::file(source_path, e))?;
        let target = fs::read_to_string(target_path).map_err(|e| Error::file(target_path, e))?;
        let src = split_lines(&source);
        let tgt = split_lines(&target);
        if src.len() != tgt.len() {
            return Err(Error::Ingestion(format!(
                "line-count mismatch: {} has {} lines, {} has {}",
                source_path.display(),
                src.len(),
                target_path.display(),
                tgt.len()
            )));
        }
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(Error::Ingestion(format!("empty line at line {}", i + 1)));
            }
        }
        Corpus::from_texts(name, src.into_iter().zip(tgt))
    }

    /// Writes the corpus back as two parallel LF-terminated files.
    pub fn write(&self, source_path: &Path, target_path: &Path) -> Result<()> {
        let mut src = String::new();
        let mut tgt = String::new();
        for p in &self.pairs {
            src.push_str(&p.focal_test);
            src.push('\n');
            tgt.push_str(&p.assertion);
            tgt.push('\n');
        }
        fs::write(source_path, src).map_err(|e| Error::file(source_path, e))?;
        fs::write(target_path, tgt).map_err(|e| Error::file(target_path, e))?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pairs(&self) -> &[TestAssertPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&TestAssertPair> {
        self.pairs.get(id)
    }

    pub fn relabel(&self, name: impl Into<String>) -> Corpus {
        Corpus {
            name: name.into(),
            pairs: self.pairs.clone(),
        }
    }

    pub fn type_stats(&self) -> TypeStats {
        TypeStats::from_assertions(self.pairs.iter().map(|p| p.assertion.as_str()))
    }
}

fn split_lines(text: &str) -> Vec<&str> {
    let text = text.strip_suffix('\n').unwrap_or(text);
    if text.is_empty() {
        return Vec::new();
    }
    text.split('\n').collect()
}

/// The retrieval codebase is the training split itself.
pub fn build_codebase(train: &Corpus) -> Corpus {
    train.relabel(format!("{}-codebase", train.name))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Seeded shuffle, then `floor(r * n)` pairs for train and validation and
/// the remainder for test. Each split is re-identified from zero.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    let total: f64 = spec.ratios.iter().sum();
    if spec.ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::Split(format!("ratios {:?} must be non-negative and sum to 1", spec.ratios)));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 pairs, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // the small slack keeps 0.8 * 10 from landing just below 8 after rounding
    let n_train = (spec.ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_valid = (spec.ratios[1] * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Split(format!(
            "degenerate split of {n} pairs: sizes {n_train}, {n_valid}, {}",
            n.saturating_sub(n_train + n_valid)
        )));
    }
    let take = |range: &[usize], label: &str| {
        Corpus::from_texts(
            format!("{}-{label}", corpus.name),
            range.iter().map(|&i| {
                let p = &corpus.pairs[i];
                (p.focal_test.clone(), p.assertion.clone())
            }),
        )
    };
    Ok((
        take(&order[..n_train], "train")?,
        take(&order[n_train..n_train + n_valid], "valid")?,
        take(&order[n_train + n_valid..], "test")?,
    ))
}

/// JUnit assertion categories, in the column order used by the reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AssertionType {
    Equals,
    True,
    That,
    NotNull,
    False,
    Null,
    ArrayEquals,
    Same,
    Other,
}

impl AssertionType {
    pub const ALL: [AssertionType; 9] = [
        AssertionType::Equals,
        AssertionType::True,
        AssertionType::That,
        AssertionType::NotNull,
        AssertionType::False,
        AssertionType::Null,
        AssertionType::ArrayEquals,
        AssertionType::Same,
        AssertionType::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            AssertionType::Equals => "Equals",
            AssertionType::True => "True",
            AssertionType::That => "That",
            AssertionType::NotNull => "NotNull",
            AssertionType::False => "False",
            AssertionType::Null => "Null",
            AssertionType::ArrayEquals => "ArrayEquals",
            AssertionType::Same => "Same",
            AssertionType::Other => "Other",
        }
    }

    fn from_method(name: &str) -> Self {
        match name {
            "assertEquals" => AssertionType::Equals,
            "assertTrue" => AssertionType::True,
            "assertThat" => AssertionType::That,
            "assertNotNull" => AssertionType::NotNull,
            "assertFalse" => AssertionType::False,
            "assertNull" => AssertionType::Null,
            "assertArrayEquals" => AssertionType::ArrayEquals,
            "assertSame" => AssertionType::Same,
            _ => AssertionType::Other,
        }
    }
}

impl fmt::Display for AssertionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Category of the first `assert*` identifier; package qualifiers such as
/// `org . junit . Assert .` are skipped naturally.
pub fn classify_assertion(assertion: &str) -> AssertionType {
    assertion
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '$'))
        .find(|tok| tok.starts_with("assert"))
        .map_or(AssertionType::Other, AssertionType::from_method)
}

/// Per-type assertion counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeStats {
    pub counts: [usize; 9],
}

impl TypeStats {
    pub fn from_assertions<'a>(assertions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = [0; 9];
        for a in assertions {
            counts[classify_assertion(a).index()] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, t: AssertionType) -> usize {
        self.counts[t.index()]
    }

    /// Two-line table: header, then `label` with total and per-type
    /// counts with their rounded share.
    pub fn table(&self, label: &str) -> String {
        let mut header = vec!["AssertType".to_string(), "Total".to_string()];
        header.extend(AssertionType::ALL.iter().map(|t| t.label().to_string()));
        let total = self.total();
        let mut row = vec![label.to_string(), group_thousands(total)];
        for t in AssertionType::ALL {
            let c = self.count(t);
            let pct = if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 };
            row.push(format!("{} ({:.0}%)", group_thousands(c), pct));
        }
        format!("{}\n{}\n", header.join("\t"), row.join("\t"))
    }
}

pub(crate) fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
