use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ast::{parse_assertion, AssertionAst};
use super::{code_tokens, ngram_stats};
use crate::error::{Error, Result};

/// Subtrees are cut this many levels below their root (root counts as 1).
pub const SUBTREE_DEPTH: usize = 3;
pub const KEYWORD_WEIGHT: f64 = 5.0;

const JAVA_KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const", "continue",
    "default", "do", "double", "else", "enum", "extends", "false", "final", "finally", "float", "for", "goto",
    "if", "implements", "import", "instanceof", "int", "interface", "long", "native", "new", "null", "package",
    "private", "protected", "public", "return", "short", "static", "strictfp", "super", "switch",
    "synchronized", "this", "throw", "throws", "transient", "true", "try", "void", "volatile", "while",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuWeights {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast: f64,
    pub dataflow: f64,
}

impl Default for CodeBleuWeights {
    fn default() -> Self {
        Self { ngram: 0.25, weighted_ngram: 0.25, ast: 0.25, dataflow: 0.25 }
    }
}

impl CodeBleuWeights {
    fn validate(&self) -> Result<()> {
        let w = [self.ngram, self.weighted_ngram, self.ast, self.dataflow];
        if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("CodeBLEU weights {w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

/// Per-component scores; `None` marks a component that could not be
/// computed and whose weight went to the n-gram components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuParts {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast: Option<f64>,
    pub dataflow: Option<f64>,
    pub score: f64,
}

pub fn is_keyword(token: &str) -> bool {
    token.starts_with("assert") || JAVA_KEYWORDS.contains(&token)
}

/// BLEU whose unigram precision counts keyword tokens five times.
pub fn weighted_bleu(pred: &[String], gold: &[String]) -> f64 {
    let mut stats = ngram_stats(pred, gold);
    let weight = |t: &str| if is_keyword(t) { KEYWORD_WEIGHT } else { 1.0 };
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut pred_counts: HashMap<&str, usize> = HashMap::new();
    for t in pred {
        *pred_counts.entry(t).or_default() += 1;
    }
    let (mut matched, mut total) = (0.0, 0.0);
    for (t, &c) in &pred_counts {
        let w = weight(t);
        total += w * c as f64;
        matched += w * c.min(gold_counts.get(t).copied().unwrap_or(0)) as f64;
    }
    stats.matches[0] = matched;
    stats.totals[0] = total;
    stats.score()
}

fn subtree_key(node: &AssertionAst, depth: usize) -> String {
    let mut key = node.label();
    if depth > 1 {
        let children = node.children();
        if !children.is_empty() {
            key.push('(');
            for (i, c) in children.iter().enumerate() {
                if i > 0 {
                    key.push(' ');
                }
                key.push_str(&subtree_key(c, depth - 1));
            }
            key.push(')');
        }
    }
    key
}

/// One depth-bounded subtree per node, keyed by its serialized labels.
pub fn subtrees(root: &AssertionAst) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        out.push(subtree_key(n, SUBTREE_DEPTH));
        stack.extend(n.children());
    }
    out
}

fn clipped_fraction(gold: &[String], pred: &[String]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let mut avail: HashMap<&str, usize> = HashMap::new();
    for p in pred {
        *avail.entry(p).or_default() += 1;
    }
    let mut hit = 0usize;
    for g in gold {
        if let Some(c) = avail.get_mut(g.as_str()) {
            if *c > 0 {
                *c -= 1;
                hit += 1;
            }
        }
    }
    Some(hit as f64 / gold.len() as f64)
}

/// Fraction of gold subtrees (multiset) found in the prediction's tree.
pub fn ast_match(pred: &AssertionAst, gold: &AssertionAst) -> f64 {
    clipped_fraction(&subtrees(gold), &subtrees(pred)).unwrap_or(0.0)
}

fn identifiers<'a>(node: &'a AssertionAst, out: &mut Vec<&'a str>) {
    if let AssertionAst::Identifier(n) = node {
        out.push(n);
    }
    for c in node.children() {
        identifiers(c, out);
    }
}

/// Ordered identifier pairs `a -> b` where `a` precedes `b` inside the
/// arguments of the same call.
pub fn dataflow_pairs(root: &AssertionAst) -> Vec<String> {
    let mut pairs = Vec::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        if let AssertionAst::MethodCall { args, .. } = n {
            let mut ids = Vec::new();
            for a in args {
                identifiers(a, &mut ids);
            }
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    pairs.push(format!("{}->{}", ids[i], ids[j]));
                }
            }
        }
        stack.extend(n.children());
    }
    pairs
}

pub fn codebleu(pred: &str, gold: &str, weights: CodeBleuWeights) -> Result<CodeBleuParts> {
    weights.validate()?;
    let (p, g) = (code_tokens(pred), code_tokens(gold));
    let ngram = ngram_stats(&p, &g).score();
    let weighted_ngram = weighted_bleu(&p, &g);
    let trees = match (parse_assertion(pred), parse_assertion(gold)) {
        (Ok(p), Ok(g)) => Some((p, g)),
        _ => None,
    };
    let ast = trees.as_ref().map(|(p, g)| ast_match(p, g));
    let dataflow = trees
        .as_ref()
        .and_then(|(p, g)| clipped_fraction(&dataflow_pairs(g), &dataflow_pairs(p)));

    let mut spare = 0.0;
    let mut total = 0.0;
    for (part, w) in [(ast, weights.ast), (dataflow, weights.dataflow)] {
        match part {
            Some(v) => total += w * v,
            None => spare += w,
        }
    }
    let base = weights.ngram + weights.weighted_ngram;
    let (wn, ww) = if base > 0.0 {
        (weights.ngram + spare * weights.ngram / base, weights.weighted_ngram + spare * weights.weighted_ngram / base)
    } else {
        (spare / 2.0, spare / 2.0)
    };
    total += wn * ngram + ww * weighted_ngram;
    Ok(CodeBleuParts { ngram, weighted_ngram, ast, dataflow, score: total.clamp(0.0, 1.0) })
}
