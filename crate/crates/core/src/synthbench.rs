//! Deterministic synthetic TAP corpora for desk-scale experiments.
//!
//! * `copy`: the assertion is a fixed rearrangement of the focal-test.
//! * `paraphrase-retrieval`: every class shares an ordered triple of method
//!   calls; the assertion carries a class payload plus the query's own
//!   receiver. Training members of a class also share their call argument.
//!   Each valid/test query has exactly one codebase pair of its class,
//!   written with disjoint identifiers, while a decoy of another class uses
//!   the query's identifiers verbatim, so token overlap points the wrong way.
//! * `edit-one-arg`: like the paraphrase family but without renaming; the
//!   gold differs from the matched pair's assertion in one argument.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestAssertPair};
use crate::error::{Error, Result};

pub const MIN_PAIRS: usize = 12;

/// Training members per non-held-out class.
const CLASS_SIZE: usize = 4;

const IDENTIFIERS: [&str; 48] = [
    "list", "map", "user", "order", "cart", "item", "node", "tree", "queue", "stack", "buffer", "stream",
    "file", "path", "config", "cache", "store", "index", "parser", "lexer", "token", "graph", "edge", "vertex",
    "matrix", "vector", "point", "shape", "color", "image", "frame", "widget", "button", "panel", "window",
    "socket", "client", "server", "request", "response", "session", "account", "ledger", "invoice", "payment",
    "record", "entry", "bucket",
];

const METHODS: [&str; 24] = [
    "add", "remove", "put", "clear", "push", "pop", "open", "close", "read", "write", "flush", "reset",
    "start", "stop", "merge", "split", "load", "save", "send", "parse", "insert", "update", "append", "visit",
];

const GETTERS: [&str; 16] = [
    "getSize", "getName", "getCount", "getValue", "getFirst", "getLast", "getHead", "getTail", "getKey",
    "getLength", "getWidth", "getHeight", "getDepth", "getState", "getLimit", "getOffset",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Copy,
    ParaphraseRetrieval,
    EditOneArg,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Copy => "copy",
            Family::ParaphraseRetrieval => "paraphrase-retrieval",
            Family::EditOneArg => "edit-one-arg",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Family::Copy, Family::ParaphraseRetrieval, Family::EditOneArg]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Synth(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Training pairs; validation and test get `n / 8` each.
    pub n: usize,
    pub family: Family,
    /// Size of the identifier pool (at most 48).
    pub atoms: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(family: Family, n: usize, seed: u64) -> Self {
        Self { n, family, atoms: IDENTIFIERS.len(), seed }
    }
}

/// Intended codebase match of a valid/test query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMatch {
    pub split: String,
    pub query_id: usize,
    pub match_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    pub planted: Vec<PlantedMatch>,
}

impl SynthCorpus {
    pub fn planted_for(&self, split: &str, query_id: usize) -> Option<usize> {
        self.planted
            .iter()
            .find(|p| p.split == split && p.query_id == query_id)
            .map(|p| p.match_id)
    }

    /// Line-delimited planted-match records.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for p in &self.planted {
            writeln!(w, "{}", serde_json::to_string(p)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_sidecar(path: &Path) -> Result<Vec<PlantedMatch>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Identifiers filling the receiver/argument slots.
type Idents = [&'static str; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Class {
    methods: [&'static str; 3],
    literal: usize,
    getter: &'static str,
}

fn focal_test(class: &Class, ids: &Idents) -> String {
    format!(
        "void test ( ) {{ {} . {} ( {} ) ; {} . {} ( ) ; {} . {} ( ) ; }}",
        ids[0], class.methods[0], ids[1], ids[2], class.methods[1], ids[3], class.methods[2]
    )
}

fn class_assertion(class: &Class, receiver: &str) -> String {
    format!("assertEquals ( {} , {receiver} . {} ( ) )", class.literal, class.getter)
}

fn draw_idents(rng: &mut ChaCha8Rng, pool: &[&'static str], avoid: &[&str]) -> Idents {
    let free: Vec<&'static str> = pool.iter().copied().filter(|w| !avoid.contains(w)).collect();
    let picked: Vec<&'static str> = free.choose_multiple(rng, 4).copied().collect();
    [picked[0], picked[1], picked[2], picked[3]]
}

fn draw_classes(rng: &mut ChaCha8Rng, count: usize) -> Vec<Class> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m: Vec<&'static str> = METHODS.choose_multiple(rng, 3).copied().collect();
        if seen.insert((m[0], m[1], m[2])) {
            out.push(Class {
                methods: [m[0], m[1], m[2]],
                literal: rng.random_range(0..16),
                getter: GETTERS[rng.random_range(0..GETTERS.len())],
            });
        }
    }
    out
}

fn make_corpus(name: &str, pairs: Vec<(String, String)>) -> Result<Corpus> {
    Corpus::from_texts(name, pairs)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.n < MIN_PAIRS {
        return Err(Error::Synth(format!("need at least {MIN_PAIRS} pairs, got {}", spec.n)));
    }
    if !(12..=IDENTIFIERS.len()).contains(&spec.atoms) {
        return Err(Error::Synth(format!("identifier pool must hold 12..={} atoms", IDENTIFIERS.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = &IDENTIFIERS[..spec.atoms];
    let held = (spec.n / 8).max(1);
    match spec.family {
        Family::Copy => copy_family(spec, &mut rng, pool, held),
        Family::ParaphraseRetrieval | Family::EditOneArg => retrieval_family(spec, &mut rng, pool, held),
    }
}

fn copy_family(spec: &SynthSpec, rng: &mut ChaCha8Rng, pool: &[&'static str], held: usize) -> Result<SynthCorpus> {
    let mut make = |count: usize| -> Vec<(String, String)> {
        (0..count)
            .map(|_| {
                let ids: Vec<&str> = pool.choose_multiple(rng, 2).copied().collect();
                let m = METHODS[rng.random_range(0..METHODS.len())];
                (
                    format!("void test ( ) {{ {} . {m} ( {} ) ; }}", ids[0], ids[1]),
                    format!("assertEquals ( {} , {} . {} ( ) )", ids[1], ids[0], copy_getter(m)),
                )
            })
            .collect()
    };
    let (train, valid, test) = (make(spec.n), make(held), make(held));
    Ok(SynthCorpus {
        train: make_corpus("copy-train", train)?,
        valid: make_corpus("copy-valid", valid)?,
        test: make_corpus("copy-test", test)?,
        planted: Vec::new(),
    })
}

/// Copy-family getter derived from the called method.
fn copy_getter(method: &str) -> String {
    format!("was{}{}", method[..1].to_uppercase(), &method[1..])
}

fn retrieval_family(spec: &SynthSpec, rng: &mut ChaCha8Rng, pool: &[&'static str], held: usize) -> Result<SynthCorpus> {
    let renamed = spec.family == Family::ParaphraseRetrieval;
    // held-out classes contribute one training member each; the rest come
    // in groups of CLASS_SIZE
    let paired = (spec.n - 2 * held) / CLASS_SIZE;
    let singles = spec.n - CLASS_SIZE * paired;
    let classes = draw_classes(rng, paired + singles);

    // (class, identifiers) per training slot, then shuffled into ids
    let mut train: Vec<(usize, Idents)> = Vec::with_capacity(spec.n);
    for c in 0..paired {
        let a = draw_idents(rng, pool, &[]);
        let mut used: Vec<&str> = a.to_vec();
        train.push((c, a));
        for _ in 1..CLASS_SIZE {
            let b = if renamed {
                // receivers differ, the call argument is a shared fixture
                let mut b = draw_idents(rng, pool, &used);
                b[1] = a[1];
                b
            } else {
                rename_one(rng, pool, &a)
            };
            used.extend(b);
            train.push((c, b));
        }
    }
    for c in paired..paired + singles {
        train.push((c, draw_idents(rng, pool, &[])));
    }
    train.shuffle(rng);

    let mut planted = Vec::new();
    let mut held_out = |split: &str, first_class: usize, rng: &mut ChaCha8Rng| -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(held);
        for q in 0..held {
            let class = first_class + q;
            let match_id = train.iter().position(|t| t.0 == class).expect("held-out class has a member");
            let matched_ids = train[match_id].1;
            let ids = if renamed {
                // borrow the identifiers of a decoy from another class,
                // provided they are disjoint from the planted match
                let candidates: Vec<usize> = (0..train.len())
                    .filter(|&i| train[i].0 != class && train[i].1.iter().all(|w| !matched_ids.contains(w)))
                    .collect();
                match candidates.choose(rng) {
                    Some(&d) => train[d].1,
                    None => draw_idents(rng, pool, &matched_ids),
                }
            } else {
                rename_one(rng, pool, &matched_ids)
            };
            let c = &classes[class];
            out.push((focal_test(c, &ids), class_assertion(c, ids[0])));
            planted.push(PlantedMatch { split: split.to_string(), query_id: q, match_id });
        }
        out
    };
    let valid = held_out("valid", paired, rng);
    let test = held_out("test", paired + held, rng);
    let train_texts = train
        .iter()
        .map(|(c, ids)| (focal_test(&classes[*c], ids), class_assertion(&classes[*c], ids[0])))
        .collect();
    let name = spec.family.name();
    Ok(SynthCorpus {
        train: make_corpus(&format!("{name}-train"), train_texts)?,
        valid: make_corpus(&format!("{name}-valid"), valid)?,
        test: make_corpus(&format!("{name}-test"), test)?,
        planted,
    })
}

/// Same identifiers except the receiver of the first call.
fn rename_one(rng: &mut ChaCha8Rng, pool: &[&'static str], ids: &Idents) -> Idents {
    let mut out = *ids;
    let free: Vec<&'static str> = pool.iter().copied().filter(|w| !ids.contains(w)).collect();
    out[0] = free[rng.random_range(0..free.len())];
    out
}

/// Construction-aware oracle: the matched pair's assertion with its
/// receiver replaced by the query's (copy family: rearranged query).
pub fn oracle_prediction(family: Family, query_ft: &str, matched: Option<&TestAssertPair>) -> Option<String> {
    let words: Vec<&str> = query_ft.split_whitespace().collect();
    let receiver = *words.get(5)?;
    match family {
        Family::Copy => {
            let (m, arg) = (words.get(7)?, words.get(9)?);
            Some(format!("assertEquals ( {arg} , {receiver} . {} ( ) )", copy_getter(m)))
        }
        Family::ParaphraseRetrieval | Family::EditOneArg => {
            let matched = matched?;
            let theirs = *matched.focal_test.split_whitespace().collect::<Vec<_>>().get(5)?;
            Some(
                matched
                    .assertion
                    .split_whitespace()
                    .map(|w| if w == theirs { receiver } else { w })
                    .collect::<Vec<_>>()
                    .join(" "),
            )
        }
    }
}

/// Class signature of a retrieval-family focal-test: its three methods.
pub fn signature(focal_test: &str) -> Option<[&str; 3]> {
    let w: Vec<&str> = focal_test.split_whitespace().collect();
    Some([w.get(7)?, w.get(14)?, w.get(20)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::jaccard_retrieve;

    #[test]
    fn rejects_tiny_specs() {
        assert!(generate_synthetic(&SynthSpec::new(Family::Copy, 11, 0)).is_err());
        assert!(generate_synthetic(&SynthSpec::new(Family::Copy, 12, 0)).is_ok());
        assert!(generate_synthetic(&SynthSpec { atoms: 5, ..SynthSpec::new(Family::Copy, 64, 0) }).is_err());
    }

    #[test]
    fn copy_family_is_derivable() {
        let s = generate_synthetic(&SynthSpec::new(Family::Copy, 64, 1)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (64, 8, 8));
        for p in s.train.pairs().iter().chain(s.test.pairs()) {
            assert_eq!(oracle_prediction(Family::Copy, &p.focal_test, None).unwrap(), p.assertion);
        }
    }

    #[test]
    fn deterministic() {
        for f in [Family::Copy, Family::ParaphraseRetrieval, Family::EditOneArg] {
            let spec = SynthSpec::new(f, 96, 7);
            assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        }
    }

    #[test]
    fn paraphrase_defeats_jaccard_but_not_the_oracle() {
        let s = generate_synthetic(&SynthSpec::new(Family::ParaphraseRetrieval, 512, 0)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (512, 64, 64));
        let mut jaccard_hits = 0;
        for q in s.test.pairs() {
            let planted = s.planted_for("test", q.id).unwrap();
            let m = &s.train.pairs()[planted];
            // the oracle embedding: equal class signature, unique in train
            let sig = signature(&q.focal_test).unwrap();
            let same: Vec<usize> = s
                .train
                .pairs()
                .iter()
                .filter(|p| signature(&p.focal_test).unwrap() == sig)
                .map(|p| p.id)
                .collect();
            assert_eq!(same, vec![planted]);
            assert_eq!(oracle_prediction(Family::ParaphraseRetrieval, &q.focal_test, Some(m)).unwrap(), q.assertion);
            let qw: Vec<&str> = q.focal_test.split_whitespace().collect();
            assert!(m.focal_test.split_whitespace().filter(|w| w.chars().all(char::is_alphabetic)).all(|w| {
                METHODS.contains(&w) || w == "void" || w == "test" || !qw.contains(&w)
            }));
            if jaccard_retrieve(&s.train, &q.focal_test, 1, None).unwrap()[0].pair.id == planted {
                jaccard_hits += 1;
            }
        }
        assert!((jaccard_hits as f64) < 0.3 * 64.0, "{jaccard_hits}");
    }

    #[test]
    fn edit_one_arg_changes_exactly_one_argument() {
        let s = generate_synthetic(&SynthSpec::new(Family::EditOneArg, 64, 3)).unwrap();
        for q in s.test.pairs() {
            let m = &s.train.pairs()[s.planted_for("test", q.id).unwrap()];
            let (a, b): (Vec<&str>, Vec<&str>) =
                (q.assertion.split_whitespace().collect(), m.assertion.split_whitespace().collect());
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
            assert_eq!(oracle_prediction(Family::EditOneArg, &q.focal_test, Some(m)).unwrap(), q.assertion);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let s = generate_synthetic(&SynthSpec::new(Family::ParaphraseRetrieval, 48, 2)).unwrap();
        let dir = std::env::temp_dir().join(format!("synth-sidecar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("planted.jsonl");
        s.write_sidecar(&path).unwrap();
        assert_eq!(SynthCorpus::read_sidecar(&path).unwrap(), s.planted);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
