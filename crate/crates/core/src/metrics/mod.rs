//! Exact match, BLEU, CodeBLEU-lite and the evaluation/overlap reports.

mod ast;
mod codebleu;

pub use ast::{parse_assertion, AssertionAst, LiteralKind};
pub use codebleu::{
    ast_match, codebleu, dataflow_pairs, is_keyword, subtrees, weighted_bleu, CodeBleuParts, CodeBleuWeights,
    SUBTREE_DEPTH,
};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{classify_assertion, group_thousands, AssertionType, Corpus};
use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;
pub const BLEU_VARIANT: &str = "corpus BLEU-4, add-one smoothing for n>=2 when any higher-order match count is zero";

/// Splits code into identifiers, numbers, string/char literals and
/// punctuation, ignoring whitespace.
pub fn code_tokens(text: &str) -> Vec<String> {
    const MULTI: [&str; 10] = ["==", "!=", "<=", ">=", "&&", "||", "->", "::", "++", "--"];
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphabetic() || c == '_' || c == '$' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            while i < chars.len() {
                let d = chars[i];
                let next_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
                let exp_sign = (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E') && next_digit;
                if d.is_alphanumeric() || d == '_' || (d == '.' && next_digit) || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c {
                i += if chars[i] == '\\' { 2 } else { 1 };
            }
            i = (i + 1).min(chars.len());
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            i += if MULTI.contains(&two.as_str()) { 2 } else { 1 };
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    code_tokens(pred) == code_tokens(gold)
}

/// Clipped n-gram match counts and totals for n = 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [f64; MAX_NGRAM],
    pub totals: [f64; MAX_NGRAM],
    pub pred_len: usize,
    pub gold_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_NGRAM {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.pred_len += other.pred_len;
        self.gold_len += other.gold_len;
    }

    pub fn score(&self) -> f64 {
        if self.pred_len == 0 || self.matches[0] == 0.0 {
            return 0.0;
        }
        let smooth = self.matches[1..].contains(&0.0);
        let mut log_sum = 0.0;
        for n in 0..MAX_NGRAM {
            let (m, t) = (self.matches[n], self.totals[n]);
            log_sum += if n > 0 && smooth { ((m + 1.0) / (t + 1.0)).ln() } else { (m / t).ln() };
        }
        let bp = if self.pred_len > self.gold_len {
            1.0
        } else {
            (1.0 - self.gold_len as f64 / self.pred_len as f64).exp()
        };
        (bp * (log_sum / MAX_NGRAM as f64).exp()).clamp(0.0, 1.0)
    }
}

pub fn ngram_stats(pred: &[String], gold: &[String]) -> BleuStats {
    let mut s = BleuStats { pred_len: pred.len(), gold_len: gold.len(), ..BleuStats::default() };
    for n in 1..=MAX_NGRAM {
        let mut gold_counts: HashMap<&[String], usize> = HashMap::new();
        for g in gold.windows(n) {
            *gold_counts.entry(g).or_default() += 1;
        }
        let mut matched = 0;
        let windows = pred.windows(n);
        s.totals[n - 1] = windows.len() as f64;
        for p in windows {
            if let Some(c) = gold_counts.get_mut(p) {
                if *c > 0 {
                    *c -= 1;
                    matched += 1;
                }
            }
        }
        s.matches[n - 1] = matched as f64;
    }
    s
}

/// Sentence BLEU over code tokens.
pub fn bleu(pred: &str, gold: &str) -> f64 {
    ngram_stats(&code_tokens(pred), &code_tokens(gold)).score()
}

pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut total = BleuStats::default();
    for (p, g) in pairs {
        total.add(&ngram_stats(&code_tokens(p), &code_tokens(g)));
    }
    total.score()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub assertion_type: AssertionType,
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub gold_type: AssertionType,
    pub correct: bool,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub bleu_variant: String,
    pub codebleu_weights: CodeBleuWeights,
    pub codebleu_aggregate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub bleu: f64,
    pub codebleu: f64,
    pub per_type: Vec<TypeAccuracy>,
    pub samples: Vec<SampleRecord>,
    pub meta: ReportMeta,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Summary {
        n: usize,
        correct: usize,
        accuracy: f64,
        bleu: f64,
        codebleu: f64,
        meta: &'a ReportMeta,
    },
    Type(&'a TypeAccuracy),
    Sample(&'a SampleRecord),
}

fn check_aligned(preds: usize, golds: usize) -> Result<()> {
    if preds != golds {
        return Err(Error::Alignment(format!("{preds} predictions for {golds} gold assertions")));
    }
    Ok(())
}

pub fn evaluate(preds: &[String], golds: &Corpus, weights: CodeBleuWeights) -> Result<MetricsReport> {
    check_aligned(preds.len(), golds.len())?;
    let mut per_type: Vec<TypeAccuracy> = AssertionType::ALL
        .iter()
        .map(|&t| TypeAccuracy { assertion_type: t, total: 0, correct: 0 })
        .collect();
    let mut stats = BleuStats::default();
    let mut samples = Vec::with_capacity(preds.len());
    let mut code_sum = 0.0;
    for (pred, gold) in preds.iter().zip(golds.pairs()) {
        let (pt, gt) = (code_tokens(pred), code_tokens(&gold.assertion));
        let s = ngram_stats(&pt, &gt);
        stats.add(&s);
        let correct = pt == gt;
        let gold_type = classify_assertion(&gold.assertion);
        let row = &mut per_type[gold_type.index()];
        row.total += 1;
        row.correct += correct as usize;
        code_sum += codebleu(pred, &gold.assertion, weights)?.score;
        samples.push(SampleRecord { id: gold.id, gold_type, correct, bleu: s.score() });
    }
    let n = preds.len();
    let correct = samples.iter().filter(|s| s.correct).count();
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(MetricsReport {
        n,
        correct,
        accuracy: mean(correct as f64),
        bleu: stats.score(),
        codebleu: mean(code_sum),
        per_type,
        samples,
        meta: ReportMeta {
            bleu_variant: BLEU_VARIANT.into(),
            codebleu_weights: weights,
            codebleu_aggregate: "mean of sentence scores".into(),
        },
    })
}

impl MetricsReport {
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        let summary = ReportLine::Summary {
            n: self.n,
            correct: self.correct,
            accuracy: self.accuracy,
            bleu: self.bleu,
            codebleu: self.codebleu,
            meta: &self.meta,
        };
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        for t in &self.per_type {
            writeln!(w, "{}", serde_json::to_string(&ReportLine::Type(t))?)?;
        }
        for s in &self.samples {
            writeln!(w, "{}", serde_json::to_string(&ReportLine::Sample(s))?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_records(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Headline metrics followed by the per-type accuracy breakdown.
    pub fn table(&self, system: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "System\tN\tAccuracy\tBLEU\tCodeBLEU");
        let _ = writeln!(
            out,
            "{system}\t{}\t{:.2}%\t{:.2}\t{:.2}",
            group_thousands(self.n),
            100.0 * self.accuracy,
            100.0 * self.bleu,
            100.0 * self.codebleu
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "Type\tTotal\tCorrect\tAccuracy");
        for t in &self.per_type {
            let acc = if t.total == 0 { 0.0 } else { 100.0 * t.correct as f64 / t.total as f64 };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{acc:.2}%",
                t.assertion_type.label(),
                group_thousands(t.total),
                group_thousands(t.correct)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub systems: Vec<String>,
    pub correct: Vec<usize>,
    /// Correct for this system and for no other.
    pub unique: Vec<usize>,
    /// `intersections[i][j]`: samples both systems got right.
    pub intersections: Vec<Vec<usize>>,
    pub correct_by_all: usize,
}

pub fn overlap_analysis(systems: &[(String, Vec<String>)], golds: &Corpus) -> Result<OverlapReport> {
    let hits: Vec<Vec<bool>> = systems
        .iter()
        .map(|(name, preds)| {
            check_aligned(preds.len(), golds.len()).map_err(|e| Error::Alignment(format!("{name}: {e}")))?;
            Ok(preds.iter().zip(golds.pairs()).map(|(p, g)| exact_match(p, &g.assertion)).collect())
        })
        .collect::<Result<_>>()?;
    let m = systems.len();
    let count = |f: &dyn Fn(usize) -> bool| (0..golds.len()).filter(|&s| f(s)).count();
    let correct = (0..m).map(|i| count(&|s| hits[i][s])).collect();
    let unique = (0..m)
        .map(|i| count(&|s| hits[i][s] && (0..m).all(|j| j == i || !hits[j][s])))
        .collect();
    let intersections = (0..m)
        .map(|i| (0..m).map(|j| count(&|s| hits[i][s] && hits[j][s])).collect())
        .collect();
    let correct_by_all = if m == 0 { 0 } else { count(&|s| (0..m).all(|i| hits[i][s])) };
    Ok(OverlapReport {
        systems: systems.iter().map(|(n, _)| n.clone()).collect(),
        correct,
        unique,
        intersections,
        correct_by_all,
    })
}

impl OverlapReport {
    pub fn table(&self) -> String {
        let mut out = String::from("System\tCorrect\tUnique\n");
        for (i, name) in self.systems.iter().enumerate() {
            let _ = writeln!(out, "{name}\t{}\t{}", self.correct[i], self.unique[i]);
        }
        let _ = writeln!(out, "\nIntersections\t{}", self.systems.join("\t"));
        for (i, name) in self.systems.iter().enumerate() {
            let row: Vec<String> = self.intersections[i].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{name}\t{}", row.join("\t"));
        }
        let _ = writeln!(out, "\nCorrect by all systems: {}", self.correct_by_all);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexer_splits_code() {
        assert_eq!(
            code_tokens("assertEquals(1.5e-3f, a.b(\"x, y\"), 'c')"),
            ["assertEquals", "(", "1.5e-3f", ",", "a", ".", "b", "(", "\"x, y\"", ")", ",", "'c'", ")"]
        );
        assert_eq!(code_tokens("a==b"), ["a", "==", "b"]);
        assert_eq!(code_tokens("  "), Vec::<String>::new());
    }

    #[test]
    fn exact_match_normalizes_whitespace() {
        assert!(exact_match("assertEquals ( 1 , x )", "assertEquals(1, x)"));
        assert!(!exact_match("assertEquals ( 1 , x )", "assertEquals ( 2 , x )"));
        assert!(exact_match("", ""));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("assertTrue ( x )", "assertTrue ( x )"), 1.0);
        assert_eq!(bleu("a b c", "d e f"), 0.0);
        assert_eq!(bleu("", "a"), 0.0);
        assert_eq!(bleu("x", "x"), 1.0);
        // a b c d vs a b c e: p = 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1)
        let want = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu("a b c d", "a b c e") - want).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identity_and_alignment() {
        let golds = Corpus::from_texts("g", [("t", "assertTrue ( x )"), ("u", "assertEquals ( 1 , y )")]).unwrap();
        let preds: Vec<String> = golds.pairs().iter().map(|p| p.assertion.clone()).collect();
        let r = evaluate(&preds, &golds, CodeBleuWeights::default()).unwrap();
        assert_eq!((r.accuracy, r.bleu, r.codebleu), (1.0, 1.0, 1.0));
        assert_eq!(r.per_type.iter().map(|t| t.total).sum::<usize>(), 2);
        assert!(r.table("gold").contains("100.00%"));
        let mut buf = Vec::new();
        r.write_records(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 9 + 2);
        assert!(matches!(evaluate(&preds[..1], &golds, CodeBleuWeights::default()), Err(Error::Alignment(_))));
    }

    #[test]
    fn overlap_counts() {
        let golds = Corpus::from_texts("g", (0..4).map(|i| ("t", format!("a{i}")))).unwrap();
        let sys = |name: &str, right: &[usize]| {
            let preds = (0..4).map(|i| if right.contains(&i) { format!("a{i}") } else { "z".into() }).collect();
            (name.to_string(), preds)
        };
        let one = overlap_analysis(&[sys("a", &[0, 2])], &golds).unwrap();
        assert_eq!(one.unique, vec![2]);
        let same = overlap_analysis(&[sys("a", &[0, 2]), sys("b", &[0, 2])], &golds).unwrap();
        assert_eq!(same.unique, vec![0, 0]);
        assert_eq!(same.intersections, vec![vec![2, 2], vec![2, 2]]);
    }
}
