//! Byte-pair-encoding tokenizer over whitespace pre-tokens.
//!
//! Every pre-token is split into characters followed by an end-of-word
//! sentinel symbol, so merges never cross word boundaries and decoding can
//! restore the spacing. Special tokens occupy the lowest ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// End-of-word sentinel (a private-use code point, never taken from input).
pub const END_OF_WORD: char = '\u{E000}';

/// Special token strings, in id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: String,
    pub unk: String,
    pub cls: String,
    pub eos: String,
    pub newline: String,
    pub comment: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
            cls: "[CLS]".into(),
            eos: "[EOS]".into(),
            newline: "\n".into(),
            comment: "//".into(),
        }
    }
}

impl SpecialTokens {
    fn as_vec(&self) -> Vec<&str> {
        vec![&self.pad, &self.unk, &self.cls, &self.eos, &self.newline, &self.comment]
    }

    fn from_vec(v: Vec<String>) -> Result<Self> {
        let [pad, unk, cls, eos, newline, comment]: [String; 6] = v
            .try_into()
            .map_err(|v: Vec<String>| Error::Tokenizer(format!("expected 6 special tokens, got {}", v.len())))?;
        Ok(Self {
            pad,
            unk,
            cls,
            eos,
            newline,
            comment,
        })
    }
}

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
pub const NEWLINE_ID: TokenId = 4;
pub const COMMENT_ID: TokenId = 5;
const NUM_SPECIALS: usize = 6;

pub const DEFAULT_VOCAB_SIZE: usize = 8_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    specials: SpecialTokens,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, TokenId>,
    ranks: HashMap<(String, String), usize>,
}

impl Tokenizer {
    fn assemble(specials: SpecialTokens, alphabet: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut vocab: Vec<String> = specials.as_vec().into_iter().map(String::from).collect();
        if vocab.iter().collect::<BTreeSet<_>>().len() != NUM_SPECIALS {
            return Err(Error::Tokenizer("special tokens must be distinct".into()));
        }
        // learned symbols get their own ids even when one spells a special
        let mut ids: HashMap<String, TokenId> = HashMap::new();
        let mut add = |sym: String, vocab: &mut Vec<String>| {
            if !ids.contains_key(&sym) {
                ids.insert(sym.clone(), vocab.len() as TokenId);
                vocab.push(sym);
            }
        };
        for a in &alphabet {
            add(a.clone(), &mut vocab);
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            ranks.insert((l.clone(), r.clone()), rank);
            add(format!("{l}{r}"), &mut vocab);
        }
        Ok(Self {
            specials,
            alphabet,
            merges,
            vocab,
            ids,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    fn special_id(&self, word: &str) -> Option<TokenId> {
        self.specials.as_vec().iter().position(|s| *s == word).map(|i| i as TokenId)
    }

    /// Splits `text` into pre-tokens: whitespace-separated words, with the
    /// newline special kept as its own pre-token.
    fn pre_tokens<'t>(&self, text: &'t str) -> Vec<&'t str> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push("\n");
            }
            out.extend(line.split_whitespace());
        }
        out
    }

    /// Symbols for one word before merging. Unknown characters become UNK.
    fn word_symbols(&self, word: &str) -> Vec<Symbol> {
        let mut out: Vec<Symbol> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                if c != END_OF_WORD && self.ids.contains_key(&s) {
                    Symbol::Text(s)
                } else {
                    Symbol::Unknown
                }
            })
            .collect();
        out.push(Symbol::Text(END_OF_WORD.to_string()));
        out
    }

    fn merge_word(&self, mut symbols: Vec<Symbol>) -> Vec<Symbol> {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| match (&w[0], &w[1]) {
                    (Symbol::Text(a), Symbol::Text(b)) => {
                        self.ranks.get(&(a.clone(), b.clone())).map(|&r| (r, a.clone(), b.clone()))
                    }
                    _ => None,
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && matches!((&symbols[i], &symbols[i + 1]), (Symbol::Text(x), Symbol::Text(y)) if *x == a && *y == b)
                {
                    merged.push(Symbol::Text(format!("{a}{b}")));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Encodes `text`, truncating to `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in self.pre_tokens(text) {
            if out.len() >= max_len {
                break;
            }
            if let Some(id) = self.special_id(word) {
                out.push(id);
                continue;
            }
            for sym in self.merge_word(self.word_symbols(word)) {
                out.push(match sym {
                    Symbol::Text(s) => self.ids[&s],
                    Symbol::Unknown => UNK_ID,
                });
            }
        }
        out.truncate(max_len);
        out
    }

    /// Concatenates token strings, dropping PAD, EOS and CLS. Words are
    /// rejoined with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        let flush = |current: &mut String, words: &mut Vec<String>| {
            if !current.is_empty() {
                words.push(std::mem::take(current));
            }
        };
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenRange {
                id,
                size: self.vocab_size(),
            })?;
            match id {
                PAD_ID | EOS_ID | CLS_ID => {}
                UNK_ID => current.push_str(&self.specials.unk),
                NEWLINE_ID | COMMENT_ID => {
                    flush(&mut current, &mut words);
                    words.push(tok.to_string());
                }
                _ => {
                    if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                        current.push_str(stem);
                        flush(&mut current, &mut words);
                    } else {
                        current.push_str(tok);
                    }
                }
            }
        }
        flush(&mut current, &mut words);
        Ok(words.join(" "))
    }

    /// Serialized form: header, alphabet and merge rules, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "assertrag-bpe 1");
        let _ = writeln!(s, "vocab_size {}", self.vocab_size());
        let specials: Vec<String> = self.specials.as_vec().into_iter().map(escape).collect();
        let _ = writeln!(s, "specials {}", specials.join(" "));
        let _ = writeln!(s, "alphabet {}", self.alphabet.len());
        for a in &self.alphabet {
            let _ = writeln!(s, "{}", escape(a));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(l), escape(r));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Tokenizer(format!("malformed tokenizer file: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some("assertrag-bpe 1") {
            return Err(bad("header"));
        }
        let vocab_size: usize = field(lines.next(), "vocab_size").ok_or_else(|| bad("vocab_size"))?;
        let specials_line = lines
            .next()
            .and_then(|l| l.strip_prefix("specials "))
            .ok_or_else(|| bad("specials"))?;
        let specials = SpecialTokens::from_vec(specials_line.split(' ').map(unescape).collect())?;
        let n_alpha: usize = field(lines.next(), "alphabet").ok_or_else(|| bad("alphabet"))?;
        let alphabet = (0..n_alpha)
            .map(|_| lines.next().map(unescape).ok_or_else(|| bad("alphabet entry")))
            .collect::<Result<Vec<_>>>()?;
        let n_merges: usize = field(lines.next(), "merges").ok_or_else(|| bad("merges"))?;
        let merges = (0..n_merges)
            .map(|_| {
                let line = lines.next().ok_or_else(|| bad("merge entry"))?;
                let (l, r) = line.split_once(' ').ok_or_else(|| bad("merge entry"))?;
                Ok((unescape(l), unescape(r)))
            })
            .collect::<Result<Vec<_>>>()?;
        let tok = Tokenizer::assemble(specials, alphabet, merges)?;
        if tok.vocab_size() != vocab_size {
            return Err(bad("vocabulary size does not match the merge list"));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Symbol {
    Text(String),
    Unknown,
}

fn field<T: std::str::FromStr>(line: Option<&str>, key: &str) -> Option<T> {
    line?.strip_prefix(key)?.trim().parse().ok()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Learns merges greedily by pair frequency over all focal-test and
/// assertion words of `corpus`, until the vocabulary reaches `vocab_size`
/// or no pair occurs at least twice. Frequency ties go to the
/// lexicographically smallest pair.
pub fn train_bpe(corpus: &Corpus, vocab_size: usize, specials: &SpecialTokens) -> Result<Tokenizer> {
    let special_strs = specials.as_vec();
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for p in corpus.pairs() {
        for text in [p.focal_test.as_str(), p.assertion.as_str()] {
            for w in text.split_whitespace() {
                if !special_strs.contains(&w) {
                    *word_freq.entry(w).or_default() += 1;
                }
            }
        }
    }
    let alphabet: Vec<String> = word_freq
        .keys()
        .flat_map(|w| w.chars())
        .filter(|&c| c != END_OF_WORD)
        .collect::<BTreeSet<char>>()
        .into_iter()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect();
    let base = NUM_SPECIALS + alphabet.len();
    if vocab_size < base {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} is below the {NUM_SPECIALS} specials plus {} alphabet symbols",
            alphabet.len()
        )));
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let mut syms: Vec<String> = w.chars().map(String::from).collect();
            syms.push(END_OF_WORD.to_string());
            (syms, f)
        })
        .collect();
    let mut known: BTreeSet<String> = alphabet.iter().cloned().collect();
    let mut merges = Vec::new();
    let mut size = base;
    while size < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        let joined = format!("{l}{r}");
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined) {
            size += 1;
        }
        merges.push((l, r));
    }
    Tokenizer::assemble(specials.clone(), alphabet, merges)
}
