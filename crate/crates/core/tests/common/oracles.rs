use assertrag::metrics::{ast_match, bleu, code_tokens, codebleu, corpus_bleu, parse_assertion, AssertionAst, CodeBleuWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: [&str; 12] = ["assertEquals", "(", ")", ",", "a", "b", ".", "get", "1", "x", "null", "size"];

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..14);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// Brute-force BLEU-4: count each n-gram by scanning, no hashing.
pub fn oracle_stats(pred: &[String], gold: &[String]) -> ([f64; 4], [f64; 4]) {
    let mut matches = [0.0; 4];
    let mut totals = [0.0; 4];
    for n in 1..=4 {
        if pred.len() < n {
            continue;
        }
        let grams: Vec<&[String]> = (0..=pred.len() - n).map(|i| &pred[i..i + n]).collect();
        totals[n - 1] = grams.len() as f64;
        let mut seen: Vec<&[String]> = Vec::new();
        for g in &grams {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_pred = grams.iter().filter(|h| h == &g).count();
            let in_gold = if gold.len() >= n { (0..=gold.len() - n).filter(|&i| &gold[i..i + n] == *g).count() } else { 0 };
            matches[n - 1] += in_pred.min(in_gold) as f64;
        }
    }
    (matches, totals)
}

pub fn oracle_score(matches: [f64; 4], totals: [f64; 4], pred_len: usize, gold_len: usize) -> f64 {
    if pred_len == 0 || matches[0] == 0.0 {
        return 0.0;
    }
    let smooth = matches[1..].contains(&0.0);
    let mut precisions = 1.0;
    for n in 0..4 {
        precisions *= if n > 0 && smooth { (matches[n] + 1.0) / (totals[n] + 1.0) } else { matches[n] / totals[n] };
    }
    let bp = if pred_len > gold_len { 1.0 } else { (1.0 - gold_len as f64 / pred_len as f64).exp() };
    bp * precisions.powf(0.25)
}

/// A subtree cut at a depth, compared structurally.
#[derive(Debug, PartialEq)]
pub struct Cut {
    label: String,
    children: Vec<Cut>,
}

pub fn cut(node: &AssertionAst, depth: usize) -> Cut {
    let children = if depth > 1 { node.children().into_iter().map(|c| cut(c, depth - 1)).collect() } else { Vec::new() };
    Cut { label: node.label(), children }
}

pub fn all_cuts(node: &AssertionAst, out: &mut Vec<Cut>) {
    out.push(cut(node, 3));
    for c in node.children() {
        all_cuts(c, out);
    }
}

pub fn oracle_ast(pred: &AssertionAst, gold: &AssertionAst) -> f64 {
    let (mut p, mut g) = (Vec::new(), Vec::new());
    all_cuts(pred, &mut p);
    all_cuts(gold, &mut g);
    let mut used = vec![false; p.len()];
    let mut hit = 0;
    for t in &g {
        if let Some(i) = (0..p.len()).find(|&i| !used[i] && p[i] == *t) {
            used[i] = true;
            hit += 1;
        }
    }
    hit as f64 / g.len() as f64
}

pub fn random_assertion(rng: &mut ChaCha8Rng) -> String {
    let atoms = ["a", "b", "x", "1", "2.5", "\"s\"", "null", "true", "'c'"];
    let expr = |rng: &mut ChaCha8Rng| -> String {
        match rng.random_range(0..5) {
            0 => atoms[rng.random_range(0..atoms.len())].to_string(),
            1 => format!("{} . size ( )", atoms[rng.random_range(0..3)]),
            2 => format!("{} . get ( {} )", atoms[rng.random_range(0..3)], atoms[rng.random_range(0..atoms.len())]),
            3 => format!("{} . length", atoms[rng.random_range(0..3)]),
            _ => format!("{} [ {} ]", atoms[rng.random_range(0..3)], atoms[rng.random_range(3..4)]),
        }
    };
    match rng.random_range(0..4) {
        0 => format!("assertEquals ( {} , {} )", expr(rng), expr(rng)),
        1 => format!("assertTrue ( {} )", expr(rng)),
        2 => format!("assertNull ( {} )", expr(rng)),
        _ => format!("assertSame ( {} , {} , {} )", expr(rng), expr(rng), expr(rng)),
    }
}

/// Sentence and corpus BLEU against the oracle on `n` random pairs.
pub fn check_bleu(n: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m, mut t, mut pl, mut gl) = ([0.0; 4], [0.0; 4], 0, 0);
    let mut corpus = Vec::with_capacity(n);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (p, g) = (random_sentence(&mut rng), random_sentence(&mut rng));
        let (pt, gt) = (code_tokens(&p), code_tokens(&g));
        let (a, b) = oracle_stats(&pt, &gt);
        let diff = (bleu(&p, &g) - oracle_score(a, b, pt.len(), gt.len())).abs();
        if !(diff < 1e-9) {
            return Err(format!("bleu off by {diff:e} on '{p}' | '{g}'"));
        }
        worst = worst.max(diff);
        for i in 0..4 {
            m[i] += a[i];
            t[i] += b[i];
        }
        pl += pt.len();
        gl += gt.len();
        corpus.push((p, g));
    }
    let diff = (corpus_bleu(corpus.iter().map(|(p, g)| (p.as_str(), g.as_str()))) - oracle_score(m, t, pl, gl)).abs();
    if !(diff < 1e-9) {
        return Err(format!("corpus bleu off by {diff:e}"));
    }
    Ok(worst.max(diff))
}

/// AST component of CodeBLEU against subtree enumeration on `n` pairs.
pub fn check_ast(n: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (p, g) = (random_assertion(&mut rng), random_assertion(&mut rng));
        let pt = parse_assertion(&p).map_err(|e| format!("{p}: {e}"))?;
        let gt = parse_assertion(&g).map_err(|e| format!("{g}: {e}"))?;
        let want = oracle_ast(&pt, &gt);
        let parts = codebleu(&p, &g, CodeBleuWeights::default()).map_err(|e| e.to_string())?;
        let diff = (ast_match(&pt, &gt) - want).abs().max((parts.ast.unwrap_or(f64::NAN) - want).abs());
        if !(diff < 1e-9) || !(0.0..=1.0).contains(&parts.score) {
            return Err(format!("ast off by {diff:e} on '{p}' | '{g}'"));
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}
