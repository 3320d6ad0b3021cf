use assertrag::inference::StepScorer;
use assertrag::tokenizer::{TokenId, EOS_ID};
use assertrag::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distribution is a pseudo-random function of the whole prefix.
pub struct Toy {
    pub vocab: usize,
    pub seed: u64,
}

impl StepScorer for Toy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        Ok(logits.iter().map(|l| l - z).collect())
    }
}

/// Every terminal sequence: EOS-terminated up to `max_len`, or `max_len`
/// long without EOS.
pub fn enumerate(s: &Toy, prefix: &mut Vec<TokenId>, score: f64, max_len: usize, out: &mut Vec<(Vec<TokenId>, f64)>) {
    let lp = s.log_probs(prefix).unwrap();
    for t in 0..s.vocab {
        prefix.push(t as TokenId);
        let next = score + lp[t];
        if t as TokenId == EOS_ID || prefix.len() == max_len {
            out.push((prefix.clone(), next));
        } else {
            enumerate(s, prefix, next, max_len, out);
        }
        prefix.pop();
    }
}

pub fn rescore<S: StepScorer>(s: &S, tokens: &[TokenId]) -> f64 {
    (0..tokens.len()).map(|i| s.log_probs(&tokens[..i]).unwrap()[tokens[i] as usize]).sum()
}
