//! Command-line front end: preprocess captions, train one model per feature
//! source, caption a split, combine captions, and score them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use capgen_core::decode::{beam_search, BeamConfig, ModelScorer, DEFAULT_BEAM_WIDTH};
use capgen_core::ensemble::{candidates_from_json, candidates_to_json, run_ensemble, CandidateEntry, CandidateSet, EnsembleMode};
use capgen_core::metrics::{
    evaluate_corpus, parse_candidate_file, references_from_lines, write_candidate_file, SceneGraph,
};
use capgen_core::numerics::NumericsError;
use capgen_core::textpipe::{
    add_boundaries, caption_tokens, decode, encode, group_by_image, parse_captions_file, Vocabulary, DEFAULT_MAX_LEN,
};
use capgen_core::train::{fit, Dataset, Sample, TrainConfig, TrainError};
use capgen_core::transformer::{CaptionModel, ModelConfig, ModelError, SampleInput};
use capgen_core::vision::{center_square_resize, load_ppm, read_feature_file, source_rank, FeatureMap, IMAGE_SIDE, TINYCNN};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// A failure with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERICAL, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn from_model(ctx: &str, e: ModelError) -> CliError {
    match e {
        ModelError::Numerics(NumericsError::NonFinite(_)) => CliError::numerical(format!("{ctx}: {e}")),
        other => CliError::validation(format!("{ctx}: {other}")),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    String::from_utf8(read(path)?).map_err(|_| CliError::validation(format!("{}: not UTF-8", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(name = "capgen", version, about = "Transformer image captioning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary from a captions file.
    Preprocess(PreprocessArgs),
    /// Train one caption model on a single feature source.
    Train(TrainArgs),
    /// Beam-decode a split with one or more checkpoints.
    Caption(CaptionArgs),
    /// Pick one caption per image from several models.
    Ensemble(EnsembleArgs),
    /// Score captions against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub captions: PathBuf,
    /// Vocabulary JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with training and model keys; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub backbone: String,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History JSON; defaults to the checkpoint path with `.history.json`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam: usize,
    /// Candidates JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference captions file; required by bleu-vote.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[arg(long, default_value = "bleu-vote")]
    pub mode: String,
    /// Captions file (`<image_id>\t<caption>`) to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Candidate scene graphs: JSON map image_id → list of tuples.
    #[arg(long, requires = "ref_graphs")]
    pub cand_graphs: Option<PathBuf>,
    #[arg(long, requires = "cand_graphs")]
    pub ref_graphs: Option<PathBuf>,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_timestamp: bool,
}

/// Runs a parsed command, returning the text to print on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Caption(a) => cmd_caption(&a),
        Command::Ensemble(a) => cmd_ensemble(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> Result<String, CliError> {
    let lines = parse_captions_file(&read_text(&a.captions)?).map_err(|e| CliError::validation(e.to_string()))?;
    let corpus: Vec<Vec<String>> = lines
        .iter()
        .map(|l| add_boundaries(&caption_tokens(&l.caption)))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::validation(e.to_string()))?;
    let vocab = Vocabulary::build(&corpus, a.min_freq).map_err(|e| CliError::validation(e.to_string()))?;
    write(&a.out, vocab.to_json())?;
    let tokens: usize = corpus.iter().map(|c| c.len() - 2).sum();
    let types: BTreeSet<&String> = corpus.iter().flat_map(|c| &c[1..c.len() - 1]).collect();
    if vocab.len() == 4 {
        eprintln!("warning: min_freq {} leaves only the special tokens", a.min_freq);
    }
    Ok(format!(
        "captions {}\ntokens {}\ntypes {}\nvocab_size {}\n",
        lines.len(),
        tokens,
        types.len(),
        vocab.len()
    ))
}

#[derive(Debug, Deserialize)]
struct Splits {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Deserialize)]
struct ManifestFile {
    captions: PathBuf,
    vocab: Option<PathBuf>,
    #[serde(default)]
    features: BTreeMap<String, PathBuf>,
    images_dir: Option<PathBuf>,
    splits: Splits,
}

#[derive(Debug)]
pub struct DatasetManifest {
    pub captions: BTreeMap<String, Vec<String>>,
    pub vocab: Option<Vocabulary>,
    pub features: BTreeMap<String, PathBuf>,
    pub images_dir: Option<PathBuf>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw: ManifestFile = serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let lines = parse_captions_file(&read_text(&base.join(&raw.captions))?)
            .map_err(|e| CliError::validation(format!("{}: {e}", raw.captions.display())))?;
        let captions = group_by_image(&lines);
        let vocab = match &raw.vocab {
            Some(p) => Some(
                Vocabulary::from_json(&read_text(&base.join(p))?)
                    .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let splits: BTreeMap<String, Vec<String>> =
            [("train", raw.splits.train), ("val", raw.splits.val), ("test", raw.splits.test)]
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect();
        let mut seen = BTreeMap::new();
        for (split, ids) in &splits {
            for id in ids {
                if let Some(other) = seen.insert(id.clone(), split.clone()) {
                    return Err(CliError::validation(format!("image {id} is in both {other} and {split} splits")));
                }
                if !captions.contains_key(id) {
                    return Err(CliError::validation(format!("image {id} has no captions")));
                }
            }
        }
        for name in raw.features.keys() {
            if source_rank(name).is_none() || name == TINYCNN {
                return Err(CliError::validation(format!("unknown backbone {name} in manifest")));
            }
        }
        Ok(DatasetManifest {
            captions,
            vocab,
            features: raw.features.into_iter().map(|(k, p)| (k, base.join(p))).collect(),
            images_dir: raw.images_dir.map(|p| base.join(p)),
            splits,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[String], CliError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CliError::validation(format!("unknown split {name}; use train, val or test")))
    }

    pub fn vocab(&self) -> Result<&Vocabulary, CliError> {
        self.vocab.as_ref().ok_or_else(|| CliError::validation("manifest has no vocab; run preprocess first"))
    }

    /// Model inputs for `ids` from one source: feature maps or resized images.
    pub fn inputs(&self, source: &str, ids: &[String]) -> Result<BTreeMap<String, SampleInput>, CliError> {
        if source == TINYCNN {
            let dir = self
                .images_dir
                .as_ref()
                .ok_or_else(|| CliError::validation("manifest has no images_dir for the tinycnn source"))?;
            return ids
                .iter()
                .map(|id| {
                    let path = dir.join(id).with_extension("ppm");
                    let img = load_ppm(&read(&path)?)
                        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
                    Ok((id.clone(), SampleInput::Image(center_square_resize(&img, IMAGE_SIDE))))
                })
                .collect();
        }
        if source_rank(source).is_none() {
            return Err(CliError::validation(format!("unknown backbone {source}")));
        }
        let path = self
            .features
            .get(source)
            .ok_or_else(|| CliError::validation(format!("manifest has no feature file for {source}")))?;
        let mut maps = read_feature_file(&read(path)?, source)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        ids.iter()
            .map(|id| {
                let fm: FeatureMap = maps
                    .swap_remove(id)
                    .ok_or_else(|| CliError::validation(format!("image {id} missing from {source} features")))?;
                Ok((id.clone(), SampleInput::Features(vec![fm])))
            })
            .collect()
    }

    /// One sample per (image, caption) pair.
    fn samples(&self, split: &str, inputs: &BTreeMap<String, SampleInput>, max_len: usize) -> Result<Vec<Sample>, CliError> {
        let vocab = self.vocab()?;
        let mut out = Vec::new();
        for id in self.split(split)? {
            for cap in &self.captions[id] {
                let toks = add_boundaries(&caption_tokens(cap)).map_err(|e| CliError::validation(e.to_string()))?;
                let target = encode(&toks, vocab, max_len).map_err(|e| CliError::validation(e.to_string()))?;
                out.push(Sample { input: inputs[id].clone(), target });
            }
        }
        Ok(out)
    }
}

/// Training config file: every key of the training config plus model sizes.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub d_model: usize,
    pub h: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            d_model: 128,
            h: 8,
            layers_enc: 2,
            layers_dec: 2,
            d_ff: 512,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let mut rc: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    rc.train.seed = a.seed;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let vocab = manifest.vocab()?;
    let ids: Vec<String> = [manifest.split("train")?, manifest.split("val")?].concat();
    let inputs = manifest.inputs(&a.backbone, &ids)?;
    let dim = match inputs.values().next() {
        Some(SampleInput::Features(f)) => f[0].dim(),
        _ => rc.d_model,
    };
    let mut cfg = ModelConfig::for_source(&a.backbone, dim, vocab.len());
    cfg.d_model = rc.d_model;
    cfg.h = rc.h;
    cfg.layers_enc = rc.layers_enc;
    cfg.layers_dec = rc.layers_dec;
    cfg.d_ff = rc.d_ff;
    cfg.max_len = rc.max_len;
    if a.backbone == TINYCNN {
        cfg.sources[0].dim = rc.d_model;
        cfg.tinycnn = true;
    }
    let data = Dataset {
        train: manifest.samples("train", &inputs, rc.max_len)?,
        val: manifest.samples("val", &inputs, rc.max_len)?,
    };
    let mut model = CaptionModel::init(cfg, a.seed).map_err(|e| from_model("model config", e))?;
    let history = fit(&mut model, &data, &rc.train).map_err(|e| match e {
        TrainError::NonFinite { .. } => CliError::numerical(e.to_string()),
        TrainError::Model(m) => from_model("training", m),
        other => CliError::validation(other.to_string()),
    })?;
    write(&a.out, model.save())?;
    let hist_path = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.json"));
    write(&hist_path, history.to_json())?;
    let best = &history.records[history.best_epoch];
    Ok(format!(
        "epochs {}\nbest_epoch {}\nbest_val_loss {:.6}\ncheckpoint {}\nhistory {}\n",
        history.records.len(),
        history.best_epoch,
        best.val_loss,
        a.out.display(),
        hist_path.display()
    ))
}

pub fn cmd_caption(a: &CaptionArgs) -> Result<String, CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let vocab = manifest.vocab()?;
    let ids = manifest.split(&a.split)?;
    let mut per_image: BTreeMap<String, Vec<CandidateEntry>> = ids.iter().map(|id| (id.clone(), Vec::new())).collect();
    let mut models = BTreeSet::new();
    for path in &a.checkpoint {
        let model = CaptionModel::load(&read(path)?).map_err(|e| from_model(&path.display().to_string(), e))?;
        if model.config.vocab_size != vocab.len() {
            return Err(CliError::validation(format!(
                "{}: vocab size {} does not match manifest vocab {}",
                path.display(),
                model.config.vocab_size,
                vocab.len()
            )));
        }
        let source = model.config.sources[0].name.clone();
        if !models.insert(source.clone()) {
            return Err(CliError::validation(format!("two checkpoints for source {source}")));
        }
        let inputs = manifest.inputs(&source, ids)?;
        let beam = BeamConfig::new(a.beam, model.config.max_len);
        for (id, input) in &inputs {
            let memory = model.encode_input(input).map_err(|e| from_model(id, e))?;
            let hyps = beam_search(&ModelScorer { model: &model, memory: &memory }, &beam).map_err(|e| match e {
                capgen_core::decode::DecodeError::Model(m) => from_model(id, m),
                other => CliError::validation(other.to_string()),
            })?;
            let best = &hyps[0];
            per_image.get_mut(id).unwrap().push(CandidateEntry {
                model: source.clone(),
                caption: caption_tokens(&decode(&best.ids, vocab)),
                logprob: best.logprob,
            });
        }
    }
    let sets: BTreeMap<String, CandidateSet> = per_image
        .into_iter()
        .map(|(id, entries)| {
            let set = CandidateSet::new(&id, entries).map_err(|e| CliError::validation(e.to_string()))?;
            Ok((id, set))
        })
        .collect::<Result<_, CliError>>()?;
    write(&a.out, candidates_to_json(&sets))?;
    let n: usize = sets.values().map(|s| s.entries.len()).sum();
    Ok(format!("images {}\nentries {}\n", sets.len(), n))
}

fn load_refs(path: &Path) -> Result<BTreeMap<String, capgen_core::metrics::ReferenceSet>, CliError> {
    let lines = parse_captions_file(&read_text(path)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    references_from_lines(&lines).map_err(|e| CliError::validation(e.to_string()))
}

pub fn cmd_ensemble(a: &EnsembleArgs) -> Result<String, CliError> {
    let mode: EnsembleMode = a.mode.parse().map_err(|e: capgen_core::ensemble::EnsembleError| CliError::validation(e.to_string()))?;
    let cands = candidates_from_json(&read_text(&a.candidates)?).map_err(|e| CliError::validation(e.to_string()))?;
    let refs = match &a.refs {
        Some(p) => Some(
            load_refs(p)?
                .into_iter()
                .map(|(id, r)| (id, r.references))
                .collect::<BTreeMap<_, _>>(),
        ),
        None => None,
    };
    let chosen = run_ensemble(&cands, refs.as_ref(), mode).map_err(|e| CliError::validation(e.to_string()))?;
    let captions: BTreeMap<String, Vec<String>> = chosen.iter().map(|(id, e)| (id.clone(), e.caption.clone())).collect();
    write(&a.out, write_candidate_file(&captions))?;
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    for e in chosen.values() {
        *wins.entry(e.model.as_str()).or_default() += 1;
    }
    Ok(wins.iter().map(|(m, n)| format!("{m} {n}\n")).collect())
}

fn load_graphs(path: &Path) -> Result<BTreeMap<String, SceneGraph>, CliError> {
    let raw: BTreeMap<String, Vec<Vec<String>>> = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(raw.into_iter().map(|(k, v)| (k, SceneGraph::from_tuples(v))).collect())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<String, CliError> {
    let cands = parse_candidate_file(&read_text(&a.hyp)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", a.hyp.display())))?;
    let refs = load_refs(&a.refs)?;
    let graphs = match (&a.cand_graphs, &a.ref_graphs) {
        (Some(c), Some(r)) => {
            let (mut c, mut r) = (load_graphs(c)?, load_graphs(r)?);
            let ids: BTreeSet<String> = c.keys().chain(r.keys()).cloned().collect();
            Some(
                ids.into_iter()
                    .map(|id| {
                        let pair = (c.remove(&id).unwrap_or_default(), r.remove(&id).unwrap_or_default());
                        (id, pair)
                    })
                    .collect::<BTreeMap<_, _>>(),
            )
        }
        _ => None,
    };
    let report = evaluate_corpus(&cands, &refs, graphs.as_ref()).map_err(|e| CliError::validation(e.to_string()))?;
    if let Some(out) = &a.out {
        let ts = if a.no_timestamp {
            None
        } else {
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).ok().map(|d| d.as_secs())
        };
        write(out, report.to_json(ts))?;
    }
    for f in &report.flags {
        eprintln!("note: {f}");
    }
    Ok(report.table())
}
