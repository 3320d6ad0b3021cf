//! Acceptance run: one PASS/FAIL/SKIP line per criterion.
//!
//! `ASSERTRAG_ACCEPT=A1,A6` runs a subset. `ASSERTRAG_DATA_OLD` names the
//! Data_old directory for A9. Empirical criteria (A3, A4, A5) report their
//! outcome without failing the run; the rest exit nonzero on failure.

mod common;
#[path = "../../nn/tests/ops/mod.rs"]
mod ops;

use std::path::{Path, PathBuf};
use std::time::Instant;

use assertrag::checkpoint::Checkpoint;
use assertrag::corpus::{AssertionType, Corpus};
use assertrag::experiment::{predict, run_mode, train_mode, ModeResult, Splits};
use assertrag::inference::{beam_search, greedy_decode, ModelScorer};
use assertrag::metrics::exact_match;
use assertrag::model::{assemble_input_ids, ModelConfig, RetrieverEncoder, Seq2SeqModel};
use assertrag::retriever::{jaccard_retrieve, random_retrieve, retrieval_probs, retrieve_topk, DenseIndex, ProbMode};
use assertrag::synthbench::Family;
use assertrag::tokenizer::TokenId;
use assertrag::trainer::{joint_loss, train, EncodedPair, EpochControl, RetrieverMode, TrainConfig, TrainData};
use common::toy::{enumerate, rescore, Toy};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    /// Failing a hard criterion fails the run.
    hard: bool,
    run: fn() -> Verdict,
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: "A1", title: "gradient soundness", hard: true, run: a1 },
    Criterion { id: "A2", title: "k=1 degeneracy", hard: true, run: a2 },
    Criterion { id: "A3", title: "learnability", hard: false, run: a3 },
    Criterion { id: "A4", title: "joint-vs-baseline ordering", hard: false, run: a4_a5 },
    Criterion { id: "A5", title: "retrieval precision", hard: false, run: a5_note },
    Criterion { id: "A6", title: "metric oracles", hard: true, run: a6 },
    Criterion { id: "A7", title: "probability normalization", hard: true, run: a7 },
    Criterion { id: "A8", title: "beam correctness", hard: true, run: a8 },
    Criterion { id: "A9", title: "data fidelity", hard: true, run: a9 },
    Criterion { id: "A10", title: "determinism", hard: true, run: a10 },
];

fn main() {
    let only: Option<Vec<String>> = std::env::var("ASSERTRAG_ACCEPT")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).filter(|t| !t.is_empty()).collect());
    let mut hard_failures = 0;
    for c in &CRITERIA {
        let wanted = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|t| t == id));
        // A5 is measured inside the A4 runs
        if !wanted(c.id) && !(c.id == "A5" && wanted("A4")) {
            continue;
        }
        let t = Instant::now();
        let v = (c.run)();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                if c.hard {
                    hard_failures += 1;
                }
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("{} {tag} [{:.1}s] {}: {detail}", c.id, secs, c.title);
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

fn a1() -> Verdict {
    let t = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut checked = 0;
    for case in ops::cases() {
        for seed in 0..5 {
            let r = ops::run(&case, seed);
            checked += r.checked;
            if r.max_rel_error > worst.1 || r.max_rel_error.is_nan() {
                worst = (case.name, r.max_rel_error);
            }
        }
    }
    let ops_ok = worst.1 < ops::TOL;
    let cfg = ModelConfig { max_input_len: 48, max_output_len: 12, ..ModelConfig::desk(60) };
    let joint = common::joint_grad_check(&cfg, 1, 2, ProbMode::default(), 0.01);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        ops_ok && joint.max_rel_error < ops::TOL && secs < 300.0,
        format!(
            "ops {checked} coords, worst {:.2e} ({}); joint graph {} coords (1%), max rel err {:.2e}; {secs:.0}s of 300s",
            worst.1, worst.0, joint.checked, joint.max_rel_error
        ),
    )
}

fn a2() -> Verdict {
    let (data, tok) = common::synth(Family::ParaphraseRetrieval, 128, 2, 600);
    let cfg = ModelConfig { max_input_len: 128, max_output_len: 24, ..ModelConfig::desk(tok.vocab_size()) };
    let model = Seq2SeqModel::new(cfg.clone(), 11).unwrap();
    let phi = RetrieverEncoder::from_generator(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for q in data.train.pairs().choose_multiple(&mut rng, 50) {
        let top = jaccard_retrieve(&data.train, &q.focal_test, 1, Some(q.id)).unwrap();
        let (qe, re) = (
            EncodedPair::new(&tok, q, cfg.max_input_len, cfg.max_output_len),
            EncodedPair::new(&tok, &top[0].pair, cfg.max_input_len, cfg.max_output_len),
        );
        let input = assemble_input_ids(&qe.focal_test, Some(re.as_retrieved()), cfg.max_input_len);
        let tf = model.teacher_forced_loss(&input, &qe.target).unwrap();
        for retriever in [Some(&phi), None] {
            let joint = joint_loss(&model, retriever, &tok, q, &top, ProbMode::default()).unwrap();
            worst = worst.max((joint - tf).abs() / tf);
        }
    }
    verdict(worst < 1e-12, format!("50 samples, max relative difference {worst:.1e}"))
}

fn a3() -> Verdict {
    let (data, tok) = common::synth(Family::Copy, 64, 0, 600);
    let model_cfg = ModelConfig { max_input_len: 64, max_output_len: 24, ..ModelConfig::desk(tok.vocab_size()) };
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 1e-3,
        max_epochs: 200,
        k: 1,
        patience: 200,
        mode: RetrieverMode::None,
        max_input_len: 64,
        max_output_len: 24,
        beam: 1,
        ..TrainConfig::default()
    };
    let td = TrainData { train: &data.train, codebase: &data.train, valid: &data.valid, tok: &tok };
    let model = Seq2SeqModel::new(model_cfg, cfg.seed).unwrap();
    let t = Instant::now();
    let mut best = (0.0, 0);
    let mut reached = None;
    train(&td, model, None, &cfg, &mut |view| {
        let generator = view.generator(1);
        let mut correct = 0;
        for p in view.data.train.pairs() {
            if exact_match(&generator.generate(&p.focal_test, p.id as u64)?.assertion, &p.assertion) {
                correct += 1;
            }
        }
        let em = correct as f64 / view.data.train.len() as f64;
        if em > best.0 {
            best = (em, view.record.epoch);
        }
        if em >= 0.95 {
            reached = Some(view.record.epoch);
            return Ok(EpochControl::Stop);
        }
        Ok(EpochControl::Continue)
    })
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    match reached {
        Some(epoch) => verdict(
            secs < 900.0,
            format!("train EM {:.1}% at epoch {epoch} (desk d=128 2+2, lr 1e-3); {secs:.0}s of 900s", 100.0 * best.0),
        ),
        None => Fail(format!("best train EM {:.1}% (epoch {}) after 200 epochs", 100.0 * best.0, best.1)),
    }
}

const A4_MODES: [RetrieverMode; 5] = [
    RetrieverMode::Joint,
    RetrieverMode::FrozenPretrained,
    RetrieverMode::Random,
    RetrieverMode::Jaccard,
    RetrieverMode::None,
];

/// Filled by the A4 runs, read by A5.
static A5_LINE: std::sync::Mutex<Option<(bool, String)>> = std::sync::Mutex::new(None);

fn a4_a5() -> Verdict {
    let (data, tok) = common::synth(Family::ParaphraseRetrieval, 512, 0, 600);
    let splits = Splits { train: &data.train, valid: &data.valid, test: &data.test, tok: &tok };
    let model_cfg = ModelConfig {
        d_model: 64,
        enc_layers: 1,
        dec_layers: 1,
        max_input_len: 128,
        max_output_len: 24,
        ..ModelConfig::desk(tok.vocab_size())
    };
    let expected = |q: usize| data.planted_for("test", q);
    let mut orderings = [0usize; 3];
    let mut a5_seeds = 0;
    let mut rows = Vec::new();
    let mut hits_line = Vec::new();
    for seed in 0..3u64 {
        let results: Vec<ModeResult> = A4_MODES
            .iter()
            .map(|&mode| run_mode(&splits, &model_cfg, &a4_config(mode, seed)).unwrap())
            .collect();
        let em = |m: RetrieverMode| results.iter().find(|r| r.mode == m).unwrap().report.correct;
        let (joint, frozen, random, jaccard, none) = (
            em(RetrieverMode::Joint),
            em(RetrieverMode::FrozenPretrained),
            em(RetrieverMode::Random),
            em(RetrieverMode::Jaccard),
            em(RetrieverMode::None),
        );
        orderings[0] += (joint >= frozen) as usize;
        orderings[1] += (joint >= random) as usize;
        orderings[2] += (random <= jaccard || random <= none) as usize;
        rows.push(format!("seed {seed}: joint {joint} frozen {frozen} random {random} jaccard {jaccard} none {none}"));
        let hits = |m: RetrieverMode| results.iter().find(|r| r.mode == m).unwrap().top1_hits(expected);
        let (jh, sh) = (hits(RetrieverMode::Joint), hits(RetrieverMode::Jaccard));
        a5_seeds += (jh > sh) as usize;
        hits_line.push(format!("seed {seed}: joint {jh} vs jaccard {sh}"));
    }
    let n = data.test.len();
    *A5_LINE.lock().unwrap() = Some((
        a5_seeds == 3,
        format!("top-1 planted hits of {n} ({}); holds for {a5_seeds}/3 seeds", hits_line.join("; ")),
    ));
    verdict(
        orderings.iter().all(|&c| c >= 2),
        format!(
            "test EM of {n} ({}); seeds holding joint>=frozen {}/3, joint>=random {}/3, random worst-or-near {}/3",
            rows.join("; "),
            orderings[0],
            orderings[1],
            orderings[2]
        ),
    )
}

fn a4_config(mode: RetrieverMode, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        retriever_lr: Some(1e-4),
        max_epochs: 40,
        k: 2,
        patience: 40,
        mode,
        seed,
        max_input_len: 128,
        max_output_len: 24,
        ..TrainConfig::default()
    }
}

fn a5_note() -> Verdict {
    match A5_LINE.lock().unwrap().take() {
        Some((ok, line)) => verdict(ok, line),
        None => Skip("needs the A4 runs".into()),
    }
}

fn a6() -> Verdict {
    let bleu = match common::oracles::check_bleu(100, 11) {
        Ok(w) => w,
        Err(e) => return Fail(e),
    };
    let ast = match common::oracles::check_ast(50, 5) {
        Ok(w) => w,
        Err(e) => return Fail(e),
    };
    let mut samples = 0;
    let mut corpora: Vec<Corpus> = Vec::new();
    for family in [Family::Copy, Family::ParaphraseRetrieval, Family::EditOneArg] {
        let data = assertrag::synthbench::generate_synthetic(&assertrag::synthbench::SynthSpec::new(family, 512, 0)).unwrap();
        corpora.extend([data.train, data.valid, data.test]);
    }
    if let Some((src, tgt)) = data_old_files() {
        corpora.push(Corpus::load(&src, &tgt, "data-old-test").unwrap());
    }
    for c in &corpora {
        for p in c.pairs() {
            samples += 1;
            if !exact_match(&p.assertion, &p.assertion) {
                return Fail(format!("exact_match(x, x) is false for '{}'", p.assertion));
            }
        }
    }
    Pass(format!("BLEU worst diff {bleu:.1e} on 100 pairs; AST worst diff {ast:.1e} on 50 pairs; exact_match(x,x) on {samples} samples"))
}

fn a7() -> Verdict {
    let (data, tok) = common::synth(Family::ParaphraseRetrieval, 128, 7, 400);
    let cfg = ModelConfig {
        d_model: 64,
        enc_layers: 1,
        dec_layers: 1,
        max_input_len: 64,
        max_output_len: 24,
        ..ModelConfig::desk(tok.vocab_size())
    };
    let phi = RetrieverEncoder::from_generator(&Seq2SeqModel::new(cfg, 3).unwrap());
    let index = DenseIndex::build(&data.train, &phi, &tok, 0).unwrap();
    let words: Vec<&str> = data.train.pairs().iter().flat_map(|p| p.focal_test.split_whitespace()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_sum: f64 = 0.0;
    let mut rank_checks = 0;
    for i in 0..1000 {
        let query = random_query(&mut rng, &data.train, &words);
        let k = rng.random_range(1..=8);
        let results = match i % 4 {
            0 | 1 => {
                let temperature = if i % 4 == 0 { 1.0 } else { rng.random_range(0.05..2.0) };
                retrieve_topk(&index, &data.train, &phi, &tok, &query, k, None, ProbMode::Softmax { temperature }).unwrap()
            }
            2 => jaccard_retrieve(&data.train, &query, k, None).unwrap(),
            _ => random_retrieve(&data.train, k, None, i as u64).unwrap(),
        };
        let probs: Vec<f64> = results.iter().map(|r| r.probability).collect();
        worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
        if i % 4 < 2 {
            rank_checks += 1;
            for a in &results {
                for b in &results {
                    let (ds, dp) = (a.score - b.score, a.probability - b.probability);
                    if (ds > 0.0 && dp <= 0.0) || (ds == 0.0 && dp != 0.0) {
                        return Fail(format!("query {i}: scores {} > {} but probabilities {} <= {}", a.score, b.score, a.probability, b.probability));
                    }
                }
            }
        }
        if i % 4 == 2 {
            // Jaccard scores are non-negative, so linear mode applies
            let scores: Vec<f64> = results.iter().map(|r| r.score + 1e-3).collect();
            let p = retrieval_probs(&scores, ProbMode::Linear).unwrap();
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(
        worst_sum < 1e-9,
        format!("1000 queries over dense/jaccard/random, worst |sum-1| {worst_sum:.1e}; {rank_checks} softmax rankings isomorphic"),
    )
}

/// A perturbed corpus focal test or a bag of corpus words.
fn random_query(rng: &mut ChaCha8Rng, corpus: &Corpus, words: &[&str]) -> String {
    if rng.random_bool(0.5) {
        let base = &corpus.pairs()[rng.random_range(0..corpus.len())].focal_test;
        base.split_whitespace()
            .map(|w| if rng.random_bool(0.2) { *words.choose(rng).unwrap() } else { w })
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        let len = rng.random_range(1..40);
        (0..len).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    }
}

fn a8() -> Verdict {
    let cfg = ModelConfig { max_input_len: 32, max_output_len: 8, ..ModelConfig::desk(40) };
    let model = Seq2SeqModel::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let len = rng.random_range(2..32);
        let input: Vec<TokenId> = (0..len).map(|_| rng.random_range(6..40)).collect();
        let scorer = ModelScorer::new(&model, &input).unwrap();
        let greedy = greedy_decode(&scorer, 8).unwrap();
        let beam = beam_search(&scorer, 1, 8).unwrap();
        if beam.len() != 1 || beam[0].tokens != greedy.tokens || beam[0].log_prob.to_bits() != greedy.log_prob.to_bits() {
            return Fail(format!("input {i}: beam=1 differs from greedy"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let vocab = rng.random_range(3..=5);
        let max_len = rng.random_range(1..=4);
        let toy = Toy { vocab, seed: case };
        let mut all = Vec::new();
        enumerate(&toy, &mut Vec::new(), 0.0, max_len, &mut all);
        let best = all.iter().max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0))).unwrap();
        let out = beam_search(&toy, vocab.pow(max_len as u32), max_len).unwrap();
        if out[0].tokens != best.0 || (out[0].log_prob - best.1).abs() > 1e-12 {
            return Fail(format!("toy {case} (V={vocab}, len {max_len}): beam {:?} vs optimum {:?}", out[0].tokens, best.0));
        }
        if out.iter().any(|h| (h.log_prob - rescore(&toy, &h.tokens)).abs() > 1e-9) {
            return Fail(format!("toy {case}: hypothesis score disagrees with its rescoring"));
        }
    }
    Pass("beam=1 bitwise greedy on 100 inputs; exhaustive beam optimal on 20 toys".into())
}

/// `test.source`/`test.target`, or the raw `Testing/testMethods.txt` and
/// `Testing/assertLines.txt` layout.
fn data_old_files() -> Option<(PathBuf, PathBuf)> {
    let dir = PathBuf::from(std::env::var_os("ASSERTRAG_DATA_OLD")?);
    let layouts = [("test.source", "test.target"), ("Testing/testMethods.txt", "Testing/assertLines.txt")];
    layouts
        .iter()
        .map(|(s, t)| (dir.join(s), dir.join(t)))
        .find(|(s, t)| Path::exists(s) && Path::exists(t))
}

fn a9() -> Verdict {
    let Some((src, tgt)) = data_old_files() else {
        return Skip("ASSERTRAG_DATA_OLD not set or has no test split".into());
    };
    let corpus = match Corpus::load(&src, &tgt, "data-old-test") {
        Ok(c) => c,
        Err(e) => return Fail(e.to_string()),
    };
    let stats = corpus.type_stats();
    let want = [
        (AssertionType::Equals, 7866),
        (AssertionType::True, 2783),
        (AssertionType::That, 1441),
        (AssertionType::NotNull, 1162),
        (AssertionType::False, 1006),
        (AssertionType::Null, 798),
        (AssertionType::ArrayEquals, 307),
        (AssertionType::Same, 311),
        (AssertionType::Other, 2),
    ];
    let off: Vec<String> = want
        .iter()
        .filter(|(t, n)| stats.count(*t) != *n)
        .map(|(t, n)| format!("{t} {} (want {n})", stats.count(*t)))
        .collect();
    verdict(
        stats.total() == 15676 && off.is_empty(),
        format!("total {} (want 15676){}", stats.total(), if off.is_empty() { String::new() } else { format!("; {}", off.join(", ")) }),
    )
}

fn a10() -> Verdict {
    let (data, tok) = common::synth(Family::ParaphraseRetrieval, 96, 4, 400);
    let splits = Splits { train: &data.train, valid: &data.valid, test: &data.test, tok: &tok };
    let model_cfg = ModelConfig {
        d_model: 32,
        enc_layers: 1,
        dec_layers: 1,
        max_input_len: 96,
        max_output_len: 24,
        ..ModelConfig::desk(tok.vocab_size())
    };
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        retriever_lr: Some(1e-4),
        max_epochs: 4,
        k: 2,
        refresh_batches: Some(4),
        seed: 5,
        max_input_len: 96,
        max_output_len: 24,
        beam: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train_mode(&splits, &model_cfg, &cfg).unwrap();
        let (preds, prov) = predict(&splits, &out.best.model, out.best.retriever.as_ref(), &cfg).unwrap();
        let bytes = Checkpoint::from_state(&out.best, &cfg, &tok.content_hash(), &out.history).to_bytes().unwrap();
        (out.history.without_timing(), preds, prov, bytes)
    };
    let (a, b) = (run(), run());
    verdict(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3,
        format!(
            "joint mode, {} epochs: history equal {}, predictions equal {}, provenance equal {}, checkpoint bytes equal {}",
            a.0.epochs.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            a.3 == b.3
        ),
    )
}
