use assertrag::corpus::Corpus;
use assertrag::model::{ModelConfig, RetrieverEncoder, Seq2SeqModel};
use assertrag::retriever::{retrieval_probs, retrieve_topk, DenseIndex, ProbMode};
use assertrag::tokenizer::{train_bpe, SpecialTokens};
use proptest::prelude::*;

fn corpus() -> Corpus {
    Corpus::from_texts(
        "cb",
        [
            ("void testAdd ( ) { calc . add ( 1 , 2 ) ; }", "assertEquals ( 3 , calc . add ( 1 , 2 ) )"),
            ("void testEmpty ( ) { list . clear ( ) ; }", "assertTrue ( list . isEmpty ( ) )"),
            ("void testName ( ) { user . setName ( n ) ; }", "assertEquals ( n , user . getName ( ) )"),
            ("void testNull ( ) { map . get ( k ) ; }", "assertNull ( map . get ( k ) )"),
        ],
    )
    .unwrap()
}

fn encoder() -> RetrieverEncoder {
    let cfg = ModelConfig { d_model: 16, heads: 2, max_input_len: 64, ..ModelConfig::desk(120) };
    RetrieverEncoder::from_generator(&Seq2SeqModel::new(cfg, 3).unwrap())
}

#[test]
fn built_index_is_unit_deterministic_and_self_retrieving() {
    let cb = corpus();
    let tok = train_bpe(&cb, 120, &SpecialTokens::default()).unwrap();
    let enc = encoder();
    let idx = DenseIndex::build(&cb, &enc, &tok, 1).unwrap();
    assert_eq!(idx.len(), 4);
    for row in 0..idx.len() {
        let v = idx.vector(row);
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
    assert_eq!(DenseIndex::build(&cb, &enc, &tok, 1).unwrap(), idx);

    let one = Corpus::from_texts("one", [("void t ( ) { }", "assertTrue ( x )")]).unwrap();
    assert_eq!(DenseIndex::build(&one, &enc, &tok, 0).unwrap().len(), 1);

    let q = &cb.pairs()[2].focal_test;
    let hits = retrieve_topk(&idx, &cb, &enc, &tok, q, 4, None, ProbMode::default()).unwrap();
    assert_eq!(hits[0].pair.id, 2);
    assert!((hits[0].score - 1.0).abs() < 1e-12);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    let excl = retrieve_topk(&idx, &cb, &enc, &tok, q, 3, Some(2), ProbMode::default()).unwrap();
    assert!(excl.iter().all(|h| h.pair.id != 2));
    assert!(retrieve_topk(&idx, &cb, &enc, &tok, q, 4, Some(2), ProbMode::default()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    idx.save(&path).unwrap();
    assert_eq!(DenseIndex::load(&path).unwrap(), idx);
}

fn unit_vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_filter_map("zero vector", |vs| {
        vs.into_iter()
            .map(|v| assertrag::model::normalize_embedding(&v).ok())
            .collect::<Option<Vec<_>>>()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_matches_brute_force(vs in unit_vectors(40, 6), q in unit_vectors(1, 6), k in 1usize..40, ex in prop::option::of(0usize..40)) {
        let idx = DenseIndex::from_vectors(6, 0, (0..40).collect(), vs.concat()).unwrap();
        let got = idx.search(&q[0], k, ex).unwrap();
        let mut all: Vec<(usize, f64)> = vs
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != ex)
            .map(|(i, v)| {
                let mut s = 0.0;
                for j in 0..6 {
                    s += q[0][j] * v[j];
                }
                (i, s)
            })
            .collect();
        // insertion-style selection, independent of the library sort
        let mut want = Vec::new();
        for _ in 0..k {
            let mut best = 0;
            for c in 1..all.len() {
                if all[c].1 > all[best].1 || (all[c].1 == all[best].1 && all[c].0 < all[best].0) {
                    best = c;
                }
            }
            want.push(all.remove(best));
        }
        prop_assert_eq!(got.len(), k);
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(g.0, w.0);
            prop_assert!((g.1 - w.1).abs() < 1e-12);
        }
        prop_assert!(got.iter().all(|h| Some(h.0) != ex));
    }

    #[test]
    fn softmax_is_normalized_rank_preserving_and_shift_invariant(scores in prop::collection::vec(-1.0f64..1.0, 1..12), shift in -5.0f64..5.0, t in 0.05f64..4.0) {
        let mode = ProbMode::Softmax { temperature: t };
        let p = retrieval_probs(&scores, mode).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = retrieval_probs(&shifted, mode).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
