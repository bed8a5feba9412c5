//! Caption fixture corpus: hand-picked edge cases plus seeded random pairs
//! over a small vocabulary (so n-gram overlap and repeats are common).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::words;

pub struct Pair {
    pub id: String,
    pub cand: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

const HAND: &[(&str, &[&str])] = &[
    ("the the the", &["the cat"]),
    ("the cat sat", &["the cat on the mat"]),
    ("a b c", &["a b c"]),
    ("b a", &["a b"]),
    ("the cat", &["the cat sat down"]),
    ("a man rides a horse", &["a man rides a horse"]),
    ("a dog runs on the grass", &["a dog is running on grass", "the dog runs across the lawn"]),
    ("two children play in the snow", &["kids play in snow", "two kids are playing outside in the snow"]),
    ("the dog and the cat", &["the cat and the dog"]),
    ("x y z", &["a b c"]),
    ("a", &["a"]),
    ("a a a a", &["a a", "a a a a a a"]),
    ("red ball on green grass", &["a red ball lies on the green grass"]),
    ("a b a b a b", &["b a b a"]),
    ("the girl in pink jumps", &["a girl in pink is jumping", "girl jumps"]),
];

const RANDOM_VOCAB: &[&str] = &["a", "the", "dog", "cat", "runs", "on", "grass", "red", "ball"];

fn random_sentence(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| RANDOM_VOCAB[rng.gen_range(0..RANDOM_VOCAB.len())].to_owned()).collect()
}

/// 15 hand pairs and `extra` random pairs; every sentence has at most 8 tokens.
pub fn corpus(extra: usize, seed: u64) -> Vec<Pair> {
    let mut out: Vec<Pair> = HAND
        .iter()
        .enumerate()
        .map(|(i, (c, rs))| Pair { id: format!("h{i:02}"), cand: words(c), refs: rs.iter().map(|r| words(r)).collect() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..extra {
        let cand = random_sentence(&mut rng, 8);
        let nrefs = rng.gen_range(1..=3);
        let refs = (0..nrefs).map(|_| random_sentence(&mut rng, 8)).collect();
        out.push(Pair { id: format!("r{i:02}"), cand, refs });
    }
    out
}
