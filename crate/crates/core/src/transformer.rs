//! Encoder-decoder caption model with scaled dot-product multi-head attention.
//!
//! Each feature map becomes one encoder source position after a per-source
//! input projection. Sublayers use the post-norm arrangement
//! `norm(x + sublayer(x))`. Position embeddings are learned tables.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::ByteReader;
use crate::numerics::{GradTape, NumericsError, Tensor, Var};
use crate::params::{ParamStore, Scope};
use crate::textpipe::{TokenSequence, START};
use crate::vision::{self, FeatureMap, Image, VisionError, TINYCNN};

/// Additive bias applied to blocked attention logits.
pub const MASK_BIAS: f32 = -1e9;

pub const CAPM_MAGIC: &[u8; 4] = b"CAPM";
pub const CAPM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    TooManySources { got: usize, max: usize },
    NoSources,
    UnknownSource(String),
    SourceDim { source: String, expected: usize, got: usize },
    PrefixTooLong { got: usize, max: usize },
    BadPrefix,
    TokenOutOfRange(u32),
    Checkpoint(String),
    Numerics(NumericsError),
    Vision(VisionError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(why) => write!(f, "invalid model config: {why}"),
            ModelError::TooManySources { got, max } => write!(f, "{got} source positions exceed max_len {max}"),
            ModelError::NoSources => write!(f, "at least one feature map is required"),
            ModelError::UnknownSource(s) => write!(f, "model has no input projection for source {s}"),
            ModelError::SourceDim { source, expected, got } => {
                write!(f, "source {source} expects dim {expected}, got {got}")
            }
            ModelError::PrefixTooLong { got, max } => write!(f, "prefix length {got} exceeds max_len {max}"),
            ModelError::BadPrefix => write!(f, "prefix must be non-empty and begin with the start id"),
            ModelError::TokenOutOfRange(t) => write!(f, "token id {t} outside the vocabulary"),
            ModelError::Checkpoint(why) => write!(f, "checkpoint: {why}"),
            ModelError::Numerics(e) => write!(f, "{e}"),
            ModelError::Vision(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        ModelError::Numerics(e)
    }
}

impl From<VisionError> for ModelError {
    fn from(e: VisionError) -> Self {
        match e {
            VisionError::Numerics(n) => ModelError::Numerics(n),
            other => ModelError::Vision(other),
        }
    }
}

/// A feature source the encoder accepts, with its input width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub h: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sources: Vec<SourceSpec>,
    /// Whether the model owns a TinyCNN that feeds the `tinycnn` source.
    #[serde(default)]
    pub tinycnn: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a single feature source.
    pub fn for_source(name: &str, dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            h: 8,
            layers_enc: 2,
            layers_dec: 2,
            d_ff: 512,
            vocab_size,
            max_len: crate::textpipe::DEFAULT_MAX_LEN,
            sources: vec![SourceSpec { name: name.to_owned(), dim }],
            tinycnn: false,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.h
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: &str| Err(ModelError::InvalidConfig(why.to_owned()));
        let dims = [self.d_model, self.h, self.layers_enc, self.layers_dec, self.d_ff, self.vocab_size, self.max_len];
        if dims.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.h) {
            return bad("d_model must be divisible by h");
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must cover the four specials and at least one word");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.sources.is_empty() {
            return bad("at least one source is required");
        }
        let mut seen = BTreeSet::new();
        for s in &self.sources {
            if vision::source_rank(&s.name).is_none() {
                return Err(ModelError::UnknownSource(s.name.clone()));
            }
            if s.dim == 0 || !seen.insert(s.name.as_str()) {
                return bad("source dims must be positive and names unique");
            }
        }
        if self.tinycnn && !self.sources.iter().any(|s| s.name == TINYCNN && s.dim == self.d_model) {
            return bad("tinycnn models need a tinycnn source of width d_model");
        }
        Ok(())
    }

    fn source(&self, name: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.name == name)
    }

    /// Every parameter name and shape the model owns.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v, dk) = (self.d_model, self.d_ff, self.vocab_size, self.d_k());
        let mut out = vec![
            ("tok_emb".to_owned(), vec![v, d]),
            ("pos_emb".to_owned(), vec![self.max_len, d]),
            ("out.w".to_owned(), vec![d, v]),
            ("out.b".to_owned(), vec![v]),
        ];
        for s in &self.sources {
            out.push((format!("src.{}.w", s.name), vec![s.dim, d]));
            out.push((format!("src.{}.b", s.name), vec![d]));
        }
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for i in 0..self.h {
                for w in ["wq", "wk", "wv"] {
                    out.push((format!("{p}{w}.{i}"), vec![d, dk]));
                }
            }
            out.push((format!("{p}wo"), vec![self.h * dk, d]));
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}g"), vec![d]));
            out.push((format!("{p}b"), vec![d]));
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}w1"), vec![d, f]));
            out.push((format!("{p}b1"), vec![f]));
            out.push((format!("{p}w2"), vec![f, d]));
            out.push((format!("{p}b2"), vec![d]));
        };
        for l in 0..self.layers_enc {
            attn(&mut out, &format!("enc.{l}.attn."));
            norm(&mut out, &format!("enc.{l}.ln1."));
            ff(&mut out, &format!("enc.{l}.ff."));
            norm(&mut out, &format!("enc.{l}.ln2."));
        }
        for l in 0..self.layers_dec {
            attn(&mut out, &format!("dec.{l}.self."));
            norm(&mut out, &format!("dec.{l}.ln1."));
            attn(&mut out, &format!("dec.{l}.cross."));
            norm(&mut out, &format!("dec.{l}.ln2."));
            ff(&mut out, &format!("dec.{l}.ff."));
            norm(&mut out, &format!("dec.{l}.ln3."));
        }
        if self.tinycnn {
            for (name, shape) in vision::tinycnn_shapes(d) {
                out.push((format!("cnn.{name}"), shape));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Encoder input for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Features(Vec<FeatureMap>),
    Image(Image),
}

/// Allowed/blocked attention pattern, row-major `[queries, keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    /// Query `i` may attend to keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Mask { rows: n, cols: n, allowed }
    }

    fn bias(&self) -> Tensor {
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask dims are positive")
    }
}

/// `softmax(QKᵀ/√d_k + mask_bias)·V`, returning the output and the
/// attention weights.
pub fn attention_var(
    tape: &mut GradTape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var), ModelError> {
    let dk = tape.value(q).shape()[1];
    let (kshape, vshape) = (tape.value(k).shape().to_vec(), tape.value(v).shape().to_vec());
    if kshape[1] != dk || kshape[0] != vshape[0] {
        return Err(NumericsError::ShapeMismatch { op: "attention", lhs: kshape, rhs: vshape }.into());
    }
    let kt = tape.transpose_last_two(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f32).sqrt())?;
    if let Some(m) = mask {
        let (sm, sn) = tape.value(scores).dims2().unwrap();
        if (m.rows, m.cols) != (sm, sn) {
            return Err(NumericsError::ShapeMismatch { op: "attention mask", lhs: vec![sm, sn], rhs: vec![m.rows, m.cols] }
                .into());
        }
        let b = tape.constant(m.bias());
        scores = tape.add(scores, b)?;
    }
    let weights = tape.softmax_rows(scores)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Scaled dot-product attention on plain tensors.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Mask>) -> Result<(Tensor, Tensor), ModelError> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(NumericsError::InvalidShape(t.shape().to_vec()).into());
        }
    }
    let mut tape = GradTape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (o, w) = attention_var(&mut tape, q, k, v, mask)?;
    Ok((tape.value(o).clone(), tape.value(w).clone()))
}

/// Multi-head attention with per-head projections `wq.i`, `wk.i`, `wv.i` and
/// output projection `wo`, all relative to the scope's current prefix.
pub fn multi_head_attention(
    scope: &mut Scope<'_>,
    heads: usize,
    x_q: Var,
    x_kv: Var,
    mask: Option<&Mask>,
) -> Result<Var, ModelError> {
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (wq, wk, wv) = (scope.p(&format!("wq.{i}")), scope.p(&format!("wk.{i}")), scope.p(&format!("wv.{i}")));
        let q = scope.tape.matmul(x_q, wq)?;
        let k = scope.tape.matmul(x_kv, wk)?;
        let v = scope.tape.matmul(x_kv, wv)?;
        outs.push(attention_var(scope.tape, q, k, v, mask)?.0);
    }
    let cat = scope.tape.concat_last_axis(&outs)?;
    let wo = scope.p("wo");
    Ok(scope.tape.matmul(cat, wo)?)
}

fn add_norm(scope: &mut Scope<'_>, x: Var, y: Var, ln: &str) -> Result<Var, ModelError> {
    let s = scope.tape.add(x, y)?;
    let (g, b) = scope.nested(ln, |sc| (sc.p("g"), sc.p("b")));
    Ok(scope.tape.layer_norm(s, g, b)?)
}

fn feed_forward(scope: &mut Scope<'_>, x: Var) -> Result<Var, ModelError> {
    let (w1, b1, w2, b2) = (scope.p("w1"), scope.p("b1"), scope.p("w2"), scope.p("b2"));
    let h = scope.tape.matmul(x, w1)?;
    let h = scope.tape.add_row(h, b1)?;
    let h = scope.tape.relu(h)?;
    let o = scope.tape.matmul(h, w2)?;
    Ok(scope.tape.add_row(o, b2)?)
}

fn positions(scope: &mut Scope<'_>, n: usize) -> Result<Var, ModelError> {
    let pos = scope.p("pos_emb");
    let ids: Vec<usize> = (0..n).collect();
    Ok(scope.tape.embedding_lookup(pos, &ids)?)
}

/// Projects `(source, [1, dim])` rows, adds position embeddings and runs the
/// encoder stack. Returns `[n_src, d_model]`.
pub fn encode_rows(scope: &mut Scope<'_>, cfg: &ModelConfig, rows: &[(String, Var)]) -> Result<Var, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::NoSources);
    }
    if rows.len() > cfg.max_len {
        return Err(ModelError::TooManySources { got: rows.len(), max: cfg.max_len });
    }
    let mut projected = Vec::with_capacity(rows.len());
    for (source, row) in rows {
        let spec = cfg.source(source).ok_or_else(|| ModelError::UnknownSource(source.clone()))?;
        let got = scope.tape.value(*row).numel();
        if got != spec.dim {
            return Err(ModelError::SourceDim { source: source.clone(), expected: spec.dim, got });
        }
        let (w, b) = scope.nested(&format!("src.{source}."), |sc| (sc.p("w"), sc.p("b")));
        let p = scope.tape.matmul(*row, w)?;
        projected.push(scope.tape.add_row(p, b)?);
    }
    let stacked = scope.tape.concat_rows(&projected)?;
    let pos = positions(scope, rows.len())?;
    let mut x = scope.tape.add(stacked, pos)?;
    for l in 0..cfg.layers_enc {
        x = scope.nested(&format!("enc.{l}."), |sc| {
            let a = sc.nested("attn.", |sc| multi_head_attention(sc, cfg.h, x, x, None))?;
            let x1 = add_norm(sc, x, a, "ln1.")?;
            let f = sc.nested("ff.", |sc| feed_forward(sc, x1))?;
            add_norm(sc, x1, f, "ln2.")
        })?;
    }
    Ok(x)
}

/// Encodes the sample's feature maps (or its image through the TinyCNN).
pub fn encode_input(scope: &mut Scope<'_>, cfg: &ModelConfig, input: &SampleInput) -> Result<Var, ModelError> {
    let rows = match input {
        SampleInput::Features(fms) => {
            let mut rows = Vec::with_capacity(fms.len());
            for fm in fms {
                let t = Tensor::new(vec![1, fm.dim().max(1)], fm.values.clone())
                    .map_err(|_| ModelError::SourceDim { source: fm.source.clone(), expected: 1, got: fm.dim() })?;
                rows.push((fm.source.clone(), scope.tape.constant(t)));
            }
            rows
        }
        SampleInput::Image(img) => {
            if !cfg.tinycnn {
                return Err(ModelError::UnknownSource(TINYCNN.to_owned()));
            }
            let f = scope.nested("cnn.", |sc| vision::tinycnn_forward_var(sc, img))?;
            vec![(TINYCNN.to_owned(), f)]
        }
    };
    encode_rows(scope, cfg, &rows)
}

/// Decoder stack over `ids` attending to `memory`; returns `[len, vocab]` logits.
pub fn decode_logits(scope: &mut Scope<'_>, cfg: &ModelConfig, ids: &[u32], memory: Var) -> Result<Var, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::BadPrefix);
    }
    if ids.len() > cfg.max_len {
        return Err(ModelError::PrefixTooLong { got: ids.len(), max: cfg.max_len });
    }
    if let Some(&t) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange(t));
    }
    let tok = scope.p("tok_emb");
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let emb = scope.tape.embedding_lookup(tok, &idx)?;
    let pos = positions(scope, ids.len())?;
    let mut x = scope.tape.add(emb, pos)?;
    let mask = Mask::causal(ids.len());
    for l in 0..cfg.layers_dec {
        x = scope.nested(&format!("dec.{l}."), |sc| {
            let a = sc.nested("self.", |sc| multi_head_attention(sc, cfg.h, x, x, Some(&mask)))?;
            let x1 = add_norm(sc, x, a, "ln1.")?;
            let c = sc.nested("cross.", |sc| multi_head_attention(sc, cfg.h, x1, memory, None))?;
            let x2 = add_norm(sc, x1, c, "ln2.")?;
            let f = sc.nested("ff.", |sc| feed_forward(sc, x2))?;
            add_norm(sc, x2, f, "ln3.")
        })?;
    }
    let (w, b) = (scope.p("out.w"), scope.p("out.b"));
    let logits = scope.tape.matmul(x, w)?;
    Ok(scope.tape.add_row(logits, b)?)
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl CaptionModel {
    /// Xavier-uniform matrices, small uniform embeddings, unit norm gains and
    /// zero biases, all drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (name, shape) in config.param_layout() {
            if name.starts_with("cnn.") {
                continue;
            }
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("emb") {
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.insert(&name, Tensor::new(shape, data)?);
        }
        if config.tinycnn {
            vision::init_tinycnn(&mut params, "cnn.", config.d_model, &mut rng);
        }
        Ok(CaptionModel { config, params })
    }

    /// Checks that parameter names and shapes match the config exactly.
    pub fn check_params(&self) -> Result<(), ModelError> {
        let layout = self.config.param_layout();
        if layout.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for (name, shape) in layout {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!("{name}: shape {:?} != {shape:?}", t.shape())))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    /// Encoder output `[n_src, d_model]` for a list of feature maps.
    pub fn encode(&self, features: &[FeatureMap]) -> Result<Tensor, ModelError> {
        self.encode_input(&SampleInput::Features(features.to_vec()))
    }

    pub fn encode_input(&self, input: &SampleInput) -> Result<Tensor, ModelError> {
        let mut tape = GradTape::new();
        let mut scope = Scope::frozen(&mut tape, &self.params, "");
        let v = encode_input(&mut scope, &self.config, input)?;
        Ok(tape.value(v).clone())
    }

    /// All-position logits `[len, vocab]` for `ids` given encoder memory.
    pub fn decoder_logits(&self, ids: &[u32], memory: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = GradTape::new();
        let mem = tape.constant(memory.clone());
        let mut scope = Scope::frozen(&mut tape, &self.params, "");
        let v = decode_logits(&mut scope, &self.config, ids, mem)?;
        Ok(tape.value(v).clone())
    }

    /// Next-token logits after the non-pad part of `prefix`.
    pub fn decode_step(&self, prefix: &TokenSequence, memory: &Tensor) -> Result<Vec<f32>, ModelError> {
        self.next_logits(prefix.real(), memory)
    }

    pub fn next_logits(&self, prefix: &[u32], memory: &Tensor) -> Result<Vec<f32>, ModelError> {
        if prefix.first() != Some(&START) {
            return Err(ModelError::BadPrefix);
        }
        let logits = self.decoder_logits(prefix, memory)?;
        Ok(logits.row(prefix.len() - 1).to_vec())
    }

    /// CAPM checkpoint bytes.
    pub fn save(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CAPM_MAGIC);
        out.extend_from_slice(&CAPM_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self, ModelError> {
        let err = |why: &str| ModelError::Checkpoint(why.to_owned());
        let truncated = || err("truncated");
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(CAPM_MAGIC.as_slice()) {
            return Err(err("bad magic"));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != CAPM_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let cfg_len = r.u32().ok_or_else(truncated)? as usize;
        let cfg_raw = r.take(cfg_len).ok_or_else(truncated)?;
        let config: ModelConfig = serde_json::from_slice(cfg_raw).map_err(|e| err(&format!("config: {e}")))?;
        config.validate()?;
        let mut params = ParamStore::default();
        while !r.at_end() {
            let len = r.u16().ok_or_else(truncated)? as usize;
            let raw_name = r.take(len).ok_or_else(truncated)?;
            let name = std::str::from_utf8(raw_name).map_err(|_| err("tensor name is not UTF-8"))?.to_owned();
            let rank = r.u8().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(truncated)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("tensor too large"))?;
            let data = r.f32s(n).ok_or_else(truncated)?;
            if params.get(&name).is_some() {
                return Err(err(&format!("duplicate tensor {name}")));
            }
            params.insert(&name, Tensor::new(shape, data).map_err(|e| err(&format!("{name}: {e}")))?);
        }
        let model = CaptionModel { config, params };
        model.check_params()?;
        Ok(model)
    }
}
