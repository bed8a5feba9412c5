//! Caption evaluation: BLEU-1..4, ROUGE-L, exact-match METEOR, CIDEr and
//! scene-graph tuple F1.
//!
//! All scores are computed in `f64`. Corpus reductions iterate image ids in
//! sorted order so floating-point accumulation is reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use indexmap::IndexMap;

use crate::textpipe::{group_by_image, normalize, tokenize, CaptionLine};

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA_WEIGHT: f64 = 9.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_EXPONENT: i32 = 3;
pub const CIDER_SCALE: f64 = 10.0;
pub const CIDER_MAX_N: usize = 4;

/// Report keys in display order.
pub const METRIC_KEYS: [&str; 8] = ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "meteor", "cider", "spice_f1"];

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    InvalidOrder(usize),
    MismatchedIds { missing_refs: Vec<String>, missing_cands: Vec<String> },
    EmptyReferences(String),
    MalformedLine { line: usize, reason: String },
    DuplicateId { line: usize, id: String },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::InvalidOrder(n) => write!(f, "BLEU order must be in 1..=4, got {n}"),
            MetricError::MismatchedIds { missing_refs, missing_cands } => write!(
                f,
                "image ids differ: no references for {missing_refs:?}, no candidates for {missing_cands:?}"
            ),
            MetricError::EmptyReferences(id) => write!(f, "image {id} has no non-empty reference"),
            MetricError::MalformedLine { line, reason } => write!(f, "line {line}: {reason}"),
            MetricError::DuplicateId { line, id } => write!(f, "line {line}: image {id} already has a caption"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Reference captions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub image_id: String,
    pub references: Vec<Vec<String>>,
}

impl ReferenceSet {
    pub fn new(image_id: &str, references: Vec<Vec<String>>) -> Result<Self, MetricError> {
        if references.iter().all(Vec::is_empty) {
            return Err(MetricError::EmptyReferences(image_id.to_owned()));
        }
        Ok(ReferenceSet { image_id: image_id.to_owned(), references })
    }
}

/// Set of lowercase `(object)`, `(object, attribute)` and
/// `(subject, relation, object)` tuples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    pub tuples: BTreeSet<Vec<String>>,
}

impl SceneGraph {
    pub fn from_tuples<I, T, S>(tuples: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tuples = tuples
            .into_iter()
            .map(|t| t.into_iter().map(|s| s.as_ref().trim().to_lowercase()).collect::<Vec<_>>())
            .filter(|t| (1..=3).contains(&t.len()))
            .collect();
        SceneGraph { tuples }
    }
}

/// Parses `<image_id>\t<caption>` lines into normalised token lists. Blank
/// lines are skipped; line numbers in errors are 1-based.
pub fn parse_candidate_file(text: &str) -> Result<BTreeMap<String, Vec<String>>, MetricError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| MetricError::MalformedLine { line: n + 1, reason: "missing TAB separator".into() })?;
        if id.is_empty() {
            return Err(MetricError::MalformedLine { line: n + 1, reason: "empty image id".into() });
        }
        if out.insert(id.to_owned(), tokenize(&normalize(caption))).is_some() {
            return Err(MetricError::DuplicateId { line: n + 1, id: id.to_owned() });
        }
    }
    Ok(out)
}

/// Inverse of [`parse_candidate_file`] for already-normalised captions.
pub fn write_candidate_file(captions: &BTreeMap<String, Vec<String>>) -> String {
    captions.iter().map(|(id, c)| format!("{id}\t{}\n", c.join(" "))).collect()
}

/// Normalised reference sets from parsed caption lines.
pub fn references_from_lines(lines: &[CaptionLine]) -> Result<BTreeMap<String, ReferenceSet>, MetricError> {
    group_by_image(lines)
        .into_iter()
        .map(|(id, caps)| {
            let refs = caps.iter().map(|c| tokenize(&normalize(c))).collect();
            Ok((id.clone(), ReferenceSet::new(&id, refs)?))
        })
        .collect()
}

type NgramCounts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches, candidate n-gram totals and lengths for one
/// candidate; summed across sentences for corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub clipped: [usize; 4],
    pub total: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute(candidate: &[String], refs: &[Vec<String>]) -> Self {
        let mut s = BleuStats { cand_len: candidate.len(), ..Default::default() };
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: NgramCounts<'_> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.clipped[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
            s.total[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        s.ref_len = closest_ref_len(candidate.len(), refs);
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.clipped[i] += o.clipped[i];
            self.total[i] += o.total[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of precisions 1..=n_max times the brevity penalty; 0
    /// when any precision is 0.
    pub fn score(&self, n_max: usize) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..n_max {
            if self.clipped[n] == 0 || self.total[n] == 0 {
                return 0.0;
            }
            log_sum += (self.clipped[n] as f64 / self.total[n] as f64).ln();
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / n_max as f64).exp()
    }
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

/// Sentence-level BLEU with orders 1..=n_max and no smoothing.
pub fn bleu_n(candidate: &[String], refs: &[Vec<String>], n_max: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n_max) {
        return Err(MetricError::InvalidOrder(n_max));
    }
    Ok(BleuStats::compute(candidate, refs).score(n_max))
}

/// Corpus BLEU over pooled counts and lengths.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a [String], &'a [Vec<String>])>, n_max: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n_max) {
        return Err(MetricError::InvalidOrder(n_max));
    }
    let mut acc = BleuStats::default();
    for (c, r) in pairs {
        acc.add(&BleuStats::compute(c, r));
    }
    Ok(acc.score(n_max))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with β = 1.2, maximised over references.
pub fn rouge_l(candidate: &[String], refs: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let rec = l as f64 / r.len() as f64;
            let prec = l as f64 / candidate.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Exact-match alignment maximising matches, then minimising chunks.
/// Returns `(matches, chunks)`.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w).or_default() += 1;
    }
    for w in reference {
        *ref_count.entry(w).or_default() += 1;
    }
    let need: HashMap<&str, usize> = cand_count
        .iter()
        .filter_map(|(w, &c)| ref_count.get(w).map(|&r| (*w, c.min(r))))
        .filter(|&(_, n)| n > 0)
        .collect();
    let m: usize = need.values().sum();
    if m == 0 {
        return (0, 0);
    }
    // occurrences of each word at positions >= i
    let mut remaining_after: Vec<HashMap<&str, usize>> = vec![HashMap::new(); cand.len() + 1];
    for i in (0..cand.len()).rev() {
        let mut h = remaining_after[i + 1].clone();
        *h.entry(cand[i].as_str()).or_default() += 1;
        remaining_after[i] = h;
    }
    let mut search = ChunkSearch {
        cand,
        reference,
        remaining_after,
        need,
        used: vec![false; reference.len()],
        best_links: None,
        target: m,
    };
    search.dfs(0, None, 0, 0);
    let links = search.best_links.expect("a full matching always exists");
    (m, m - links)
}

struct ChunkSearch<'a> {
    cand: &'a [String],
    reference: &'a [String],
    remaining_after: Vec<HashMap<&'a str, usize>>,
    need: HashMap<&'a str, usize>,
    used: Vec<bool>,
    best_links: Option<usize>,
    target: usize,
}

impl<'a> ChunkSearch<'a> {
    /// Adjacent links (consecutive candidate positions mapped to consecutive
    /// reference positions); chunks = matches - links.
    fn dfs(&mut self, i: usize, prev: Option<usize>, matched: usize, links: usize) {
        if self.best_links == Some(self.target - 1) {
            return;
        }
        if let Some(b) = self.best_links {
            if links + (self.target - matched) <= b {
                return;
            }
        }
        if i == self.cand.len() {
            if matched == self.target {
                self.best_links = Some(self.best_links.map_or(links, |b| b.max(links)));
            }
            return;
        }
        let w = self.cand[i].as_str();
        let still_needed = self.need.get(w).copied().unwrap_or(0);
        if still_needed > 0 {
            let mut order: Vec<usize> = Vec::new();
            if let Some(p) = prev {
                if p + 1 < self.reference.len() && !self.used[p + 1] && self.reference[p + 1] == w {
                    order.push(p + 1);
                }
            }
            order.extend((0..self.reference.len()).filter(|&j| !self.used[j] && self.reference[j] == w && Some(j) != prev.map(|p| p + 1)));
            for j in order {
                let link = usize::from(prev.is_some_and(|p| p + 1 == j));
                self.used[j] = true;
                *self.need.get_mut(w).unwrap() -= 1;
                self.dfs(i + 1, Some(j), matched + 1, links + link);
                *self.need.get_mut(w).unwrap() += 1;
                self.used[j] = false;
            }
        }
        let later = self.remaining_after[i + 1].get(w).copied().unwrap_or(0);
        if still_needed <= later {
            self.dfs(i + 1, None, matched, links);
        }
    }
}

/// Exact-match METEOR, best over references.
pub fn meteor_exact(candidate: &[String], refs: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    refs.iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let (m, chunks) = meteor_alignment(candidate, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + METEOR_ALPHA_WEIGHT * p);
            let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powi(METEOR_EXPONENT);
            f_mean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// Per-image and corpus CIDEr.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_image: BTreeMap<String, f64>,
    pub corpus: f64,
}

fn check_ids<A, B>(cands: &BTreeMap<String, A>, refs: &BTreeMap<String, B>) -> Result<(), MetricError> {
    let missing_refs: Vec<String> = cands.keys().filter(|k| !refs.contains_key(*k)).cloned().collect();
    let missing_cands: Vec<String> = refs.keys().filter(|k| !cands.contains_key(*k)).cloned().collect();
    if missing_refs.is_empty() && missing_cands.is_empty() {
        Ok(())
    } else {
        Err(MetricError::MismatchedIds { missing_refs, missing_cands })
    }
}

fn tfidf<'a>(counts: &NgramCounts<'a>, df: &HashMap<&'a [String], usize>, log_n: f64) -> HashMap<&'a [String], f64> {
    counts
        .iter()
        .map(|(g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (*g, c as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: tf-idf n-gram vectors (n = 1..=4) with document frequencies
/// over each image's reference set, `idf = ln(N / max(1, df))`; per order the
/// mean cosine similarity against each reference, scaled by 10; averaged over
/// orders.
pub fn cider(cands: &BTreeMap<String, Vec<String>>, refs: &BTreeMap<String, ReferenceSet>) -> Result<CiderScores, MetricError> {
    check_ids(cands, refs)?;
    let log_n = (refs.len() as f64).ln();
    let mut per_image: BTreeMap<String, f64> = cands.keys().map(|k| (k.clone(), 0.0)).collect();
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for rs in refs.values() {
            let grams: BTreeSet<&[String]> =
                rs.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        for (id, cand) in cands {
            let rs = &refs[id];
            let cv = tfidf(&ngram_counts(cand, n), &df, log_n);
            let sims: f64 = rs.references.iter().map(|r| cosine(&cv, &tfidf(&ngram_counts(r, n), &df, log_n))).sum();
            let mean = sims / rs.references.len() as f64;
            *per_image.get_mut(id).unwrap() += CIDER_SCALE * mean / CIDER_MAX_N as f64;
        }
    }
    let corpus = if per_image.is_empty() { 0.0 } else { per_image.values().sum::<f64>() / per_image.len() as f64 };
    Ok(CiderScores { per_image, corpus })
}

/// F1 of tuple-set overlap; 0 when either graph is empty or nothing overlaps.
pub fn tuple_f1(candidate: &SceneGraph, reference: &SceneGraph) -> f64 {
    let inter = candidate.tuples.intersection(&reference.tuples).count();
    if inter == 0 {
        return 0.0;
    }
    let p = inter as f64 / candidate.tuples.len() as f64;
    let r = inter as f64 / reference.tuples.len() as f64;
    2.0 * p * r / (p + r)
}

/// Per-sentence and corpus metrics, keys ordered as [`METRIC_KEYS`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub per_sentence: BTreeMap<String, IndexMap<String, f64>>,
    pub corpus: IndexMap<String, f64>,
    /// Image ids with conventions applied, e.g. empty candidates scored 0.
    pub flags: Vec<String>,
}

impl MetricReport {
    /// JSON with every score printed to six decimals.
    pub fn to_json(&self, timestamp: Option<u64>) -> String {
        fn scores(m: &IndexMap<String, f64>) -> String {
            let body: Vec<String> = m
                .iter()
                .map(|(k, v)| format!("{}: {:.6}", serde_json::to_string(k).unwrap(), v))
                .collect();
            format!("{{{}}}", body.join(", "))
        }
        let mut out = String::from("{\n");
        out.push_str(&format!("  \"corpus\": {},\n", scores(&self.corpus)));
        out.push_str("  \"per_sentence\": {");
        let rows: Vec<String> = self
            .per_sentence
            .iter()
            .map(|(id, m)| format!("\n    {}: {}", serde_json::to_string(id).unwrap(), scores(m)))
            .collect();
        out.push_str(&rows.join(","));
        out.push_str(if rows.is_empty() { "},\n" } else { "\n  },\n" });
        out.push_str(&format!("  \"flags\": {}", serde_json::to_string(&self.flags).unwrap()));
        if let Some(ts) = timestamp {
            out.push_str(&format!(",\n  \"generated_at\": {ts}"));
        }
        out.push_str("\n}\n");
        out
    }

    /// Fixed-order plain-text table of corpus scores.
    pub fn table(&self) -> String {
        self.corpus.iter().map(|(k, v)| format!("{k:<10} {v:.6}\n")).collect()
    }
}

/// Scores every candidate against its references. Corpus BLEU pools counts;
/// every other corpus value is the mean of the per-sentence values.
pub fn evaluate_corpus(
    cands: &BTreeMap<String, Vec<String>>,
    refs: &BTreeMap<String, ReferenceSet>,
    graphs: Option<&BTreeMap<String, (SceneGraph, SceneGraph)>>,
) -> Result<MetricReport, MetricError> {
    check_ids(cands, refs)?;
    if let Some(g) = graphs {
        check_ids(cands, g)?;
    }
    let cider_scores = cider(cands, refs)?;
    let mut report = MetricReport::default();
    let mut pooled = BleuStats::default();
    for (id, cand) in cands {
        let r = &refs[id].references;
        if cand.is_empty() {
            report.flags.push(format!("{id}: empty candidate"));
        }
        let stats = BleuStats::compute(cand, r);
        pooled.add(&stats);
        let mut row = IndexMap::new();
        for n in 1..=4 {
            row.insert(format!("bleu{n}"), stats.score(n));
        }
        row.insert("rougeL".into(), rouge_l(cand, r));
        row.insert("meteor".into(), meteor_exact(cand, r));
        row.insert("cider".into(), cider_scores.per_image[id]);
        if let Some(g) = graphs {
            let (c, rg) = &g[id];
            if c.tuples.is_empty() || rg.tuples.is_empty() {
                report.flags.push(format!("{id}: empty scene graph"));
            }
            row.insert("spice_f1".into(), tuple_f1(c, rg));
        }
        report.per_sentence.insert(id.clone(), row);
    }
    for n in 1..=4 {
        report.corpus.insert(format!("bleu{n}"), pooled.score(n));
    }
    let count = cands.len().max(1) as f64;
    for key in ["rougeL", "meteor", "cider", "spice_f1"] {
        if key == "spice_f1" && graphs.is_none() {
            continue;
        }
        let mean = report.per_sentence.values().map(|row| row[key]).sum::<f64>() / count;
        report.corpus.insert(key.into(), mean);
    }
    Ok(report)
}
