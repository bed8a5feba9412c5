//! Caption normalisation, tokenisation, vocabulary construction and encoding.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN];

pub const DEFAULT_MAX_LEN: usize = 24;
pub const DEFAULT_MIN_FREQ: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TextError {
    SpecialTokenCollision(String),
    EmptyCorpus,
    InvalidMinFreq,
    InvalidMaxLen(usize),
    MalformedVocab(String),
    MalformedLine { line: usize, reason: String },
    DuplicateCaption { line: usize, key: String },
}

impl fmt::Display for TextError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextError::SpecialTokenCollision(t) => write!(f, "token {t:?} collides with a reserved token"),
            TextError::EmptyCorpus => write!(f, "corpus is empty"),
            TextError::InvalidMinFreq => write!(f, "min_freq must be at least 1"),
            TextError::InvalidMaxLen(n) => write!(f, "max_len must be at least 2, got {n}"),
            TextError::MalformedVocab(why) => write!(f, "malformed vocabulary: {why}"),
            TextError::MalformedLine { line, reason } => write!(f, "line {line}: {reason}"),
            TextError::DuplicateCaption { line, key } => write!(f, "line {line}: duplicate caption key {key}"),
        }
    }
}

impl std::error::Error for TextError {}

/// Lowercases, replaces everything outside `[a-z0-9 ]` with a space and
/// collapses whitespace runs.
pub fn normalize(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(clean: &str) -> Vec<String> {
    clean.split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

pub fn add_boundaries(tokens: &[String]) -> Result<Vec<String>, TextError> {
    if let Some(t) = tokens.iter().find(|t| SPECIALS.contains(&t.as_str())) {
        return Err(TextError::SpecialTokenCollision(t.clone()));
    }
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(START_TOKEN.to_owned());
    out.extend(tokens.iter().cloned());
    out.push(END_TOKEN.to_owned());
    Ok(out)
}

/// normalize → tokenize, the form metrics and the vocabulary builder consume.
pub fn caption_tokens(raw: &str) -> Vec<String> {
    tokenize(&normalize(raw))
}

/// Word ↔ id mapping with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    words: Vec<String>,
}

impl Vocabulary {
    /// Keeps words with frequency `>= min_freq`, ordered by descending
    /// frequency then lexicographically.
    pub fn build(corpus: &[Vec<String>], min_freq: usize) -> Result<Self, TextError> {
        if min_freq == 0 {
            return Err(TextError::InvalidMinFreq);
        }
        if corpus.iter().all(|c| c.is_empty()) {
            return Err(TextError::EmptyCorpus);
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for tok in corpus.iter().flatten() {
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *freq.entry(tok.as_str()).or_default() += 1;
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_words(words.into_iter().map(|(w, _)| w.to_owned())))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let id_to_word: Vec<String> =
            SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        let word_to_id = id_to_word.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocabulary { word_to_id, id_to_word }
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_word.get(id as usize).map(String::as_str)
    }

    /// Corpus words in id order, specials excluded.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[SPECIALS.len()..]
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: SPECIALS.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)).collect(),
            words: self.words().to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TextError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TextError::MalformedVocab(e.to_string()))?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if file.specials.get(*s) != Some(&(i as u32)) {
                return Err(TextError::MalformedVocab(format!("special {s} must have id {i}")));
            }
        }
        if file.specials.len() != SPECIALS.len() {
            return Err(TextError::MalformedVocab("unexpected special entries".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for w in &file.words {
            if SPECIALS.contains(&w.as_str()) || !seen.insert(w.as_str()) || w.is_empty() {
                return Err(TextError::MalformedVocab(format!("bad or duplicate word {w:?}")));
            }
        }
        Ok(Self::from_words(file.words))
    }
}

/// Encoded caption padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Count of non-pad ids.
    pub length: usize,
}

impl TokenSequence {
    /// Wraps already-encoded ids; `length` counts up to the first pad.
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let length = ids.iter().position(|&i| i == PAD).unwrap_or(ids.len());
        TokenSequence { ids, length }
    }

    pub fn real(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

/// Maps boundary-wrapped tokens to ids, truncating so the end token survives
/// and padding to `max_len`.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, TextError> {
    if max_len < 2 {
        return Err(TextError::InvalidMaxLen(max_len));
    }
    let mut ids: Vec<u32> = tokens.iter().map(|t| vocab.id(t)).collect();
    if ids.len() > max_len {
        let ends_with_end = ids.last() == Some(&END);
        ids.truncate(max_len);
        if ends_with_end {
            ids[max_len - 1] = END;
        }
    }
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, length })
}

/// Joins the words of `ids` with single spaces, dropping specials and stopping
/// at the first end id.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .take_while(|&&i| i != END)
        .filter(|&&i| i > UNK)
        .filter_map(|&i| vocab.word(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One parsed line of a `<image_id>#<index>\t<caption>` file.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLine {
    pub image_id: String,
    pub index: u32,
    pub caption: String,
}

/// Parses a Flickr8k-style token file. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_captions_file(text: &str) -> Result<Vec<CaptionLine>, TextError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| TextError::MalformedLine { line: line_no, reason: reason.to_owned() };
        let (key, caption) = line.split_once('\t').ok_or_else(|| malformed("missing TAB separator"))?;
        let (image_id, index) = key.rsplit_once('#').ok_or_else(|| malformed("missing '#<index>'"))?;
        if image_id.is_empty() {
            return Err(malformed("empty image id"));
        }
        let index: u32 = index.parse().map_err(|_| malformed("caption index is not an integer"))?;
        if !seen.insert((image_id.to_owned(), index)) {
            return Err(TextError::DuplicateCaption { line: line_no, key: key.to_owned() });
        }
        out.push(CaptionLine { image_id: image_id.to_owned(), index, caption: caption.to_owned() });
    }
    Ok(out)
}

/// Groups caption lines by image id (sorted), each image's captions ordered by index.
pub fn group_by_image(lines: &[CaptionLine]) -> BTreeMap<String, Vec<String>> {
    let mut grouped: BTreeMap<String, Vec<(u32, String)>> = BTreeMap::new();
    for l in lines {
        grouped.entry(l.image_id.clone()).or_default().push((l.index, l.caption.clone()));
    }
    grouped
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|(i, _)| *i);
            (k, v.into_iter().map(|(_, c)| c).collect())
        })
        .collect()
}
