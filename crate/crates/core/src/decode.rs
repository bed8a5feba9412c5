//! Greedy and beam-search caption generation.

use std::cmp::Ordering;
use std::fmt;

use crate::numerics::{log_softmax, Tensor};
use crate::textpipe::{TokenSequence, END, PAD, START};
use crate::transformer::{CaptionModel, ModelError};

pub const DEFAULT_BEAM_WIDTH: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum DecodeError {
    InvalidConfig(String),
    BadLogits { expected: usize, got: usize },
    Model(ModelError),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::InvalidConfig(why) => write!(f, "invalid beam config: {why}"),
            DecodeError::BadLogits { expected, got } => write!(f, "scorer returned {got} logits, expected {expected}"),
            DecodeError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DecodeError {}

impl From<ModelError> for DecodeError {
    fn from(e: ModelError) -> Self {
        DecodeError::Model(e)
    }
}

/// Anything that can score the next token after a prefix beginning with the
/// start id.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f32>, DecodeError>;
}

/// A trained model bound to one image's encoder memory.
pub struct ModelScorer<'a> {
    pub model: &'a CaptionModel,
    pub memory: &'a Tensor,
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f32>, DecodeError> {
        Ok(self.model.next_logits(prefix, self.memory)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum sequence length including the start and end ids.
    pub max_len: usize,
    pub length_norm_alpha: f64,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        BeamConfig { width, max_len, length_norm_alpha: 0.0 }
    }

    fn validate(&self) -> Result<(), DecodeError> {
        if self.width == 0 {
            return Err(DecodeError::InvalidConfig("width must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(DecodeError::InvalidConfig("max_len must be at least 2".into()));
        }
        if !(self.length_norm_alpha >= 0.0 && self.length_norm_alpha.is_finite()) {
            return Err(DecodeError::InvalidConfig("length_norm_alpha must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub ids: Vec<u32>,
    /// Cumulative natural-log probability.
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// `logprob / len^alpha`, where `len` counts generated ids.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return self.logprob;
        }
        let len = self.ids.len().saturating_sub(1).max(1) as f64;
        self.logprob / len.powf(alpha)
    }

    pub fn to_sequence(&self) -> TokenSequence {
        TokenSequence { length: self.ids.len(), ids: self.ids.clone() }
    }
}

/// Best score first; equal scores fall back to the lexicographically smaller ids.
fn rank(a_score: f64, a_ids: &[u32], b_score: f64, b_ids: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_ids.cmp(b_ids))
}

/// Pad and start never appear after the first position.
fn generable(tok: usize) -> bool {
    tok != PAD as usize && tok != START as usize
}

fn step_logprobs(scorer: &impl NextTokenScorer, prefix: &[u32]) -> Result<Vec<f64>, DecodeError> {
    let logits = scorer.next_logits(prefix)?;
    if logits.len() != scorer.vocab_size() {
        return Err(DecodeError::BadLogits { expected: scorer.vocab_size(), got: logits.len() });
    }
    Ok(log_softmax(&logits))
}

/// Repeatedly appends the most probable token until the end id or `max_len`.
pub fn greedy_hypothesis(scorer: &impl NextTokenScorer, max_len: usize) -> Result<BeamHypothesis, DecodeError> {
    BeamConfig::new(1, max_len).validate()?;
    let mut ids = vec![START];
    let mut logprob = 0.0;
    while ids.len() < max_len && ids.last() != Some(&END) {
        let lp = step_logprobs(scorer, &ids)?;
        let mut best: Option<usize> = None;
        for (tok, &v) in lp.iter().enumerate().filter(|(t, _)| generable(*t)) {
            if best.is_none_or(|b| v > lp[b]) {
                best = Some(tok);
            }
        }
        let best = best.ok_or_else(|| DecodeError::InvalidConfig("vocabulary has no generable ids".into()))?;
        logprob += lp[best];
        ids.push(best as u32);
    }
    Ok(BeamHypothesis { ids, logprob, finished: true })
}

pub fn greedy_decode(scorer: &impl NextTokenScorer, max_len: usize) -> Result<TokenSequence, DecodeError> {
    Ok(greedy_hypothesis(scorer, max_len)?.to_sequence())
}

/// Beam search keeping `width` live prefixes per step.
///
/// A finished expansion (end id, or `max_len` reached) enters the completed
/// pool only when it ranks within the step's top `width` candidates; live
/// slots are filled from the best unfinished candidates regardless of how
/// many finished ones outrank them. The pool keeps the `width` best by
/// normalised score. Returns the pool best first.
pub fn beam_search(scorer: &impl NextTokenScorer, cfg: &BeamConfig) -> Result<Vec<BeamHypothesis>, DecodeError> {
    cfg.validate()?;
    let k = cfg.width;
    let alpha = cfg.length_norm_alpha;
    let mut live = vec![BeamHypothesis { ids: vec![START], logprob: 0.0, finished: false }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (h_idx, h) in live.iter().enumerate() {
            let lp = step_logprobs(scorer, &h.ids)?;
            cands.extend(
                lp.iter().enumerate().filter(|(t, _)| generable(*t)).map(|(t, &v)| (h.logprob + v, h_idx, t as u32)),
            );
        }
        // parents share one length, so (parent ids, token) order is the
        // lexicographic order of the extended ids
        let ext = |c: &(f64, usize, u32)| {
            let mut ids = live[c.1].ids.clone();
            ids.push(c.2);
            ids
        };
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| live[a.1].ids.cmp(&live[b.1].ids)).then(a.2.cmp(&b.2))
        });

        let mut next = Vec::with_capacity(k);
        for (r, c) in cands.iter().enumerate() {
            if r >= k && next.len() == k {
                break;
            }
            let ids = ext(c);
            let finished = c.2 == END || ids.len() >= cfg.max_len;
            if finished {
                if r < k {
                    pool.push(BeamHypothesis { ids, logprob: c.0, finished: true });
                }
            } else if next.len() < k {
                next.push(BeamHypothesis { ids, logprob: c.0, finished: false });
            }
        }
        pool.sort_by(|a, b| rank(a.score(alpha), &a.ids, b.score(alpha), &b.ids));
        pool.truncate(k);
        live = next;

        // without length normalisation scores only fall as prefixes grow
        if alpha == 0.0 && pool.len() == k {
            if let (Some(best_live), Some(worst)) = (live.first(), pool.last()) {
                if best_live.logprob < worst.logprob {
                    break;
                }
            }
        }
    }
    Ok(pool)
}
