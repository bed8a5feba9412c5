//! Per-image selection among captions from several model instances: majority
//! voting, BLEU-1 vote against references, and reference-free consensus.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::BleuStats;
use crate::vision::source_rank;

#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleError {
    EmptyMatrix,
    RaggedMatrix,
    InvalidRow(usize),
    MissingReferences(String),
    TooFewCandidates(String),
    EmptyCandidateSet(String),
    DuplicateModel { image_id: String, model: String },
    UnknownMode(String),
    Json(String),
}

impl fmt::Display for EnsembleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleError::EmptyMatrix => write!(f, "vote matrix has no rows or no classes"),
            EnsembleError::RaggedMatrix => write!(f, "vote matrix rows differ in length"),
            EnsembleError::InvalidRow(t) => write!(f, "vote row {t} must contain exactly one 1"),
            EnsembleError::MissingReferences(id) => write!(f, "no references for image {id}"),
            EnsembleError::TooFewCandidates(id) => write!(f, "consensus needs at least 2 candidates for image {id}"),
            EnsembleError::EmptyCandidateSet(id) => write!(f, "no candidates for image {id}"),
            EnsembleError::DuplicateModel { image_id, model } => {
                write!(f, "model {model} appears twice for image {image_id}")
            }
            EnsembleError::UnknownMode(m) => write!(f, "unknown ensemble mode {m:?}"),
            EnsembleError::Json(e) => write!(f, "candidate JSON: {e}"),
        }
    }
}

impl std::error::Error for EnsembleError {}

/// T×C one-hot vote matrix: row t marks the class chosen by classifier t.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteMatrix {
    rows: Vec<Vec<u8>>,
    classes: usize,
}

impl VoteMatrix {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, EnsembleError> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || classes == 0 {
            return Err(EnsembleError::EmptyMatrix);
        }
        for (t, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(EnsembleError::RaggedMatrix);
            }
            if r.iter().any(|&x| x > 1) || r.iter().map(|&x| x as usize).sum::<usize>() != 1 {
                return Err(EnsembleError::InvalidRow(t));
            }
        }
        Ok(VoteMatrix { rows, classes })
    }

    /// One row per vote, each naming a class index below `classes`.
    pub fn from_votes(votes: &[usize], classes: usize) -> Result<Self, EnsembleError> {
        let rows = votes
            .iter()
            .map(|&c| {
                let mut r = vec![0u8; classes];
                if c < classes {
                    r[c] = 1;
                }
                r
            })
            .collect();
        Self::new(rows)
    }

    pub fn classifiers(&self) -> usize {
        self.rows.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0usize; self.classes];
        for r in &self.rows {
            for (s, &x) in sums.iter_mut().zip(r) {
                *s += x as usize;
            }
        }
        sums
    }
}

/// Class with the largest vote total; ties go to the lowest index.
pub fn majority_vote(v: &VoteMatrix) -> usize {
    let sums = v.column_sums();
    let mut best = 0;
    for (c, &s) in sums.iter().enumerate() {
        if s > sums[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub model: String,
    pub caption: Vec<String>,
    pub logprob: f64,
}

/// Candidates for one image, in model registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub image_id: String,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    /// Sorts entries by registration order of their model names (unknown
    /// names after registered ones, by name) and rejects duplicates.
    pub fn new(image_id: &str, mut entries: Vec<CandidateEntry>) -> Result<Self, EnsembleError> {
        entries.sort_by_key(|e| model_order(&e.model));
        for w in entries.windows(2) {
            if w[0].model == w[1].model {
                return Err(EnsembleError::DuplicateModel { image_id: image_id.to_owned(), model: w[0].model.clone() });
            }
        }
        Ok(CandidateSet { image_id: image_id.to_owned(), entries })
    }
}

fn model_order(name: &str) -> (usize, String) {
    (source_rank(name).unwrap_or(usize::MAX), name.to_owned())
}

fn first_max(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn bleu1(candidate: &[String], refs: &[Vec<String>]) -> f64 {
    BleuStats::compute(candidate, refs).score(1)
}

/// Entry with the highest sentence BLEU-1 against `refs`; ties go to the
/// earlier entry.
pub fn bleu_vote<'a>(cands: &'a CandidateSet, refs: &[Vec<String>]) -> Result<&'a CandidateEntry, EnsembleError> {
    if refs.iter().all(Vec::is_empty) {
        return Err(EnsembleError::MissingReferences(cands.image_id.clone()));
    }
    if cands.entries.is_empty() {
        return Err(EnsembleError::EmptyCandidateSet(cands.image_id.clone()));
    }
    let scores: Vec<f64> = cands.entries.iter().map(|e| bleu1(&e.caption, refs)).collect();
    Ok(&cands.entries[first_max(&scores)])
}

/// Entry whose caption has the highest mean sentence BLEU-1 against the other
/// entries' captions; ties go to the earlier entry.
pub fn consensus_vote(cands: &CandidateSet) -> Result<&CandidateEntry, EnsembleError> {
    let n = cands.entries.len();
    if n < 2 {
        return Err(EnsembleError::TooFewCandidates(cands.image_id.clone()));
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| bleu1(&cands.entries[i].caption, std::slice::from_ref(&cands.entries[j].caption)))
                .sum();
            total / (n - 1) as f64
        })
        .collect();
    Ok(&cands.entries[first_max(&scores)])
}

/// Majority vote where each distinct caption is a class; classes are numbered
/// by first appearance so ties favour the earliest-registered caption.
pub fn caption_majority(cands: &CandidateSet) -> Result<&CandidateEntry, EnsembleError> {
    if cands.entries.is_empty() {
        return Err(EnsembleError::EmptyCandidateSet(cands.image_id.clone()));
    }
    let mut classes: Vec<&[String]> = Vec::new();
    let mut first_entry: Vec<usize> = Vec::new();
    let votes: Vec<usize> = cands
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| match classes.iter().position(|c| *c == e.caption.as_slice()) {
            Some(c) => c,
            None => {
                classes.push(&e.caption);
                first_entry.push(i);
                classes.len() - 1
            }
        })
        .collect();
    let v = VoteMatrix::from_votes(&votes, classes.len())?;
    Ok(&cands.entries[first_entry[majority_vote(&v)]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    BleuVote,
    Majority,
    Consensus,
}

impl FromStr for EnsembleMode {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleu-vote" => Ok(EnsembleMode::BleuVote),
            "majority" => Ok(EnsembleMode::Majority),
            "consensus" => Ok(EnsembleMode::Consensus),
            other => Err(EnsembleError::UnknownMode(other.to_owned())),
        }
    }
}

/// Selected entry per image. References are needed only for
/// [`EnsembleMode::BleuVote`].
pub fn run_ensemble(
    all: &BTreeMap<String, CandidateSet>,
    refs: Option<&BTreeMap<String, Vec<Vec<String>>>>,
    mode: EnsembleMode,
) -> Result<BTreeMap<String, CandidateEntry>, EnsembleError> {
    let mut out = BTreeMap::new();
    for (id, set) in all {
        let chosen = match mode {
            EnsembleMode::BleuVote => {
                let r = refs
                    .and_then(|r| r.get(id))
                    .ok_or_else(|| EnsembleError::MissingReferences(id.clone()))?;
                bleu_vote(set, r)?
            }
            EnsembleMode::Majority => caption_majority(set)?,
            EnsembleMode::Consensus => consensus_vote(set)?,
        };
        out.insert(id.clone(), chosen.clone());
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    model: String,
    caption: String,
    logprob: f64,
}

/// Parses `{"image_id": [{"model", "caption", "logprob"}, ...]}`.
pub fn candidates_from_json(text: &str) -> Result<BTreeMap<String, CandidateSet>, EnsembleError> {
    let raw: BTreeMap<String, Vec<JsonEntry>> =
        serde_json::from_str(text).map_err(|e| EnsembleError::Json(e.to_string()))?;
    raw.into_iter()
        .map(|(id, list)| {
            let entries = list
                .into_iter()
                .map(|e| CandidateEntry {
                    model: e.model,
                    caption: e.caption.split_whitespace().map(str::to_owned).collect(),
                    logprob: e.logprob,
                })
                .collect();
            Ok((id.clone(), CandidateSet::new(&id, entries)?))
        })
        .collect()
}

pub fn candidates_to_json(all: &BTreeMap<String, CandidateSet>) -> String {
    let raw: BTreeMap<&str, Vec<JsonEntry>> = all
        .iter()
        .map(|(id, set)| {
            let list = set
                .entries
                .iter()
                .map(|e| JsonEntry { model: e.model.clone(), caption: e.caption.join(" "), logprob: e.logprob })
                .collect();
            (id.as_str(), list)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&raw).expect("candidate map serializes");
    s.push('\n');
    s
}
