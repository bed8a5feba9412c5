//! Toy next-token scorers, an exhaustive sequence search, small random caption
//! models and a brute-force vote counter.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use capgen_core::decode::{DecodeError, NextTokenScorer};
use capgen_core::numerics::Tensor;
use capgen_core::transformer::{CaptionModel, ModelConfig};
use capgen_core::vision::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PAD: u32 = 0;
const START: u32 = 1;
const END: u32 = 2;

/// Logits drawn from a seeded stream keyed by the prefix.
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f32,
}

impl NextTokenScorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f32>, DecodeError> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        Ok((0..self.vocab).map(|_| rng.gen_range(-self.scale..self.scale)).collect())
    }
}

fn log_probs(logits: &[f32]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
    xs.iter().map(|x| x - mx - z.ln()).collect()
}

/// Highest total log-probability sequence among all that end with the end id
/// or reach `max_len`; ties go to the lexicographically smaller ids.
pub fn exhaustive_best(scorer: &impl NextTokenScorer, max_len: usize) -> (Vec<u32>, f64) {
    fn go(s: &impl NextTokenScorer, prefix: &mut Vec<u32>, lp: f64, max_len: usize, best: &mut Option<(Vec<u32>, f64)>) {
        let done = prefix.last() == Some(&END) || prefix.len() == max_len;
        if done {
            let better = match best {
                None => true,
                Some((ids, b)) => lp > *b || (lp == *b && prefix.as_slice() < ids.as_slice()),
            };
            if better {
                *best = Some((prefix.clone(), lp));
            }
            return;
        }
        let l = log_probs(&s.next_logits(prefix).unwrap());
        for t in 0..s.vocab_size() as u32 {
            if t == PAD || t == START {
                continue;
            }
            prefix.push(t);
            go(s, prefix, lp + l[t as usize], max_len, best);
            prefix.pop();
        }
    }
    let mut best = None;
    go(scorer, &mut vec![START], 0.0, max_len, &mut best);
    best.unwrap()
}

/// Number of complete hypotheses `exhaustive_best` ranges over.
pub fn hypothesis_count(vocab: usize, max_len: usize) -> usize {
    fn go(len: usize, vocab: usize, max_len: usize) -> usize {
        if len == max_len {
            return 1;
        }
        // end closes a hypothesis; every other generable id extends it
        1 + (vocab - 3) * go(len + 1, vocab, max_len)
    }
    go(1, vocab, max_len)
}

pub fn tiny_config(vocab: usize, max_len: usize) -> ModelConfig {
    let mut cfg = ModelConfig::for_source("resnet50", 4, vocab);
    cfg.d_model = 8;
    cfg.h = 2;
    cfg.layers_enc = 1;
    cfg.layers_dec = 1;
    cfg.d_ff = 16;
    cfg.max_len = max_len;
    cfg
}

/// Random tiny model plus the encoder memory of a random feature vector.
pub fn random_model(seed: u64, vocab: usize, max_len: usize) -> (CaptionModel, Tensor) {
    let model = CaptionModel::init(tiny_config(vocab, max_len), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let f = FeatureMap::new("resnet50", (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let memory = model.encode(&[f]).unwrap();
    (model, memory)
}

/// Column counts by scanning, then the first column holding the maximum.
pub fn brute_vote(rows: &[Vec<u8>]) -> usize {
    let classes = rows[0].len();
    let counts: Vec<usize> = (0..classes).map(|c| rows.iter().filter(|r| r[c] == 1).count()).collect();
    let top = *counts.iter().max().unwrap();
    counts.iter().position(|&n| n == top).unwrap()
}
