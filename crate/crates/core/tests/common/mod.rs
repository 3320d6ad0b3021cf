#![allow(dead_code)]

pub mod oracles;
pub mod toy;

use assertrag::model::{Dropout, ModelConfig, RetrievedTokens, RetrieverEncoder, Seq2SeqModel};
use assertrag::retriever::ProbMode;
use assertrag::synthbench::{generate_synthetic, Family, SynthCorpus, SynthSpec};
use assertrag::tokenizer::{train_bpe, SpecialTokens, TokenId, Tokenizer, CLS_ID, EOS_ID};
use assertrag::trainer::{joint_loss_in, live_probs_in};
use assertrag_nn::{grad_check, sample_coords, Coord, GradCheckReport, Graph, NnError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ff_mult: 2,
        max_input_len: 48,
        max_output_len: 12,
        dropout: 0.0,
        ..ModelConfig::desk(vocab)
    }
}

pub fn synth(family: Family, n: usize, seed: u64, vocab: usize) -> (SynthCorpus, Tokenizer) {
    let data = generate_synthetic(&SynthSpec::new(family, n, seed)).unwrap();
    let tok = train_bpe(&data.train, vocab, &SpecialTokens::default()).unwrap();
    (data, tok)
}

/// Random ids in the non-special range.
pub fn random_ids(rng: &mut ChaCha8Rng, vocab: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    let len = rng.random_range(lo..hi);
    (0..len).map(|_| rng.random_range(6..vocab) as TokenId).collect()
}

/// Sampled finite-difference check of the joint loss with respect to θ and
/// φ. φ coordinates go through the whole graph, probabilities computed live
/// from φ; θ coordinates see the same probabilities as fixed values, which
/// is how they enter θ's gradient, and skip re-encoding with φ.
pub fn joint_grad_check(cfg: &ModelConfig, seed: u64, k: usize, mode: ProbMode, fraction: f64) -> GradCheckReport {
    let v = cfg.vocab_size;
    let theta = Seq2SeqModel::new(cfg.clone(), seed).unwrap();
    let mut phi = RetrieverEncoder::from_generator(&theta);
    // move φ off θ's encoder so the two stores are distinct points
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for i in 0..phi.params.len() {
        for v in phi.params.tensor_mut(i).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let query = random_ids(&mut rng, v, 1, 4);
    let mut target = random_ids(&mut rng, v, 1, 2);
    target.push(EOS_ID);
    let taps: Vec<(Vec<TokenId>, Vec<TokenId>)> =
        (0..k).map(|_| (random_ids(&mut rng, v, 1, 3), random_ids(&mut rng, v, 1, 3))).collect();
    let keys: Vec<Vec<TokenId>> = taps.iter().map(|t| [&[CLS_ID][..], &t.0].concat()).collect();
    let key_ids: Vec<&[TokenId]> = keys.iter().map(Vec::as_slice).collect();
    let q = [&[CLS_ID][..], &query].concat();
    let retrieved: Vec<RetrievedTokens> =
        taps.iter().map(|t| RetrievedTokens { focal_test: &t.0, assertion: &t.1 }).collect();
    let stores = [theta.params.clone(), phi.params.clone()];
    let coords = sample_coords(&stores, fraction, &mut rng);
    let (theta_coords, phi_coords): (Vec<Coord>, Vec<Coord>) = coords.iter().partition(|c| c.0 == 0);
    let wrap = |e: assertrag::Error| NnError::InvalidTensor(e.to_string());

    let fixed = {
        let mut g = Graph::new();
        let b = g.bind(&phi.params, false);
        let p = live_probs_in(&mut g, &b, cfg, &q, &key_ids, mode).unwrap();
        g.value(p).to_vec()
    };
    let theta_report = grad_check(&stores, Some(&theta_coords), 1e-3, |g, b| {
        let probs = g.constant(1, k, fixed.clone())?;
        joint_loss_in(g, &b[0], cfg, &query, &target, &retrieved, Some(probs), &mut Dropout::eval()).map_err(wrap)
    })
    .unwrap();
    let phi_report = grad_check(&stores, Some(&phi_coords), 1e-3, |g, b| {
        let probs = live_probs_in(g, &b[1], cfg, &q, &key_ids, mode).map_err(wrap)?;
        joint_loss_in(g, &b[0], cfg, &query, &target, &retrieved, Some(probs), &mut Dropout::eval()).map_err(wrap)
    })
    .unwrap();
    let worst = if theta_report.max_rel_error >= phi_report.max_rel_error { theta_report.worst } else { phi_report.worst };
    GradCheckReport {
        max_rel_error: theta_report.max_rel_error.max(phi_report.max_rel_error),
        checked: theta_report.checked + phi_report.checked,
        worst,
    }
}
