//! Teacher-forced training: masked cross-entropy, Adam/Adamax, linear warmup,
//! and early stopping that restores the best validation weights.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{GradTape, NumericsError, Tensor};
use crate::params::{ParamStore, Scope};
use crate::textpipe::{TokenSequence, PAD};
use crate::transformer::{decode_logits, encode_input, CaptionModel, ModelError, SampleInput};
use crate::vision::augment_hflip;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    EmptySplit(&'static str),
    LengthMismatch { logits: usize, targets: usize },
    ShapeMismatch(String),
    ShortTarget(usize),
    NonFinite { epoch: usize, step: usize, detail: String },
    Model(ModelError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(why) => write!(f, "invalid training config: {why}"),
            TrainError::EmptySplit(split) => write!(f, "{split} split is empty"),
            TrainError::LengthMismatch { logits, targets } => {
                write!(f, "{logits} logit rows for {targets} targets")
            }
            TrainError::ShapeMismatch(name) => write!(f, "gradient shape does not match parameter {name}"),
            TrainError::ShortTarget(i) => write!(f, "sample {i} has fewer than two real tokens"),
            TrainError::NonFinite { epoch, step, detail } => {
                write!(f, "non-finite value at epoch {epoch}, step {step}: {detail}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Probability of mirroring an image sample each time it is drawn.
    pub hflip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            base_lr: 1e-5,
            peak_lr: 1e-4,
            warmup_fraction: 0.1,
            max_epochs: 30,
            patience: 5,
            seed: 42,
            optimizer: OptimizerKind::Adamax,
            hflip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |why: &str| Err(TrainError::InvalidConfig(why.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.base_lr.is_finite() && self.peak_lr.is_finite()) || self.base_lr < 0.0 || self.base_lr > self.peak_lr {
            return bad("need 0 <= base_lr <= peak_lr");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Linear ramp from `base_lr` to `peak_lr` over the first
/// `warmup_fraction * total_steps` steps, then constant.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s >= warmup {
        cfg.peak_lr
    } else {
        cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * s / warmup
    }
}

/// Per-position `-log softmax(logits_i)[target_i]` (0 at pad targets) and
/// the mean over non-pad positions.
pub fn cross_entropy_masked(logits: &Tensor, targets: &TokenSequence) -> Result<(Vec<f64>, f64), TrainError> {
    let (rows, v) = logits
        .dims2()
        .ok_or_else(|| TrainError::ShapeMismatch("logits must be 2-D".into()))?;
    if rows != targets.ids.len() {
        return Err(TrainError::LengthMismatch { logits: rows, targets: targets.ids.len() });
    }
    let mut losses = Vec::with_capacity(rows);
    let mut real = 0usize;
    for (i, &t) in targets.ids.iter().enumerate() {
        if t == PAD {
            losses.push(0.0);
            continue;
        }
        if t as usize >= v {
            return Err(TrainError::Model(ModelError::TokenOutOfRange(t)));
        }
        let ls = crate::numerics::log_softmax(logits.row(i));
        losses.push(-ls[t as usize]);
        real += 1;
    }
    let mean = if real == 0 { 0.0 } else { losses.iter().sum::<f64>() / real as f64 };
    Ok((losses, mean))
}

/// First and second moment accumulators keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    /// Adam's second moment, or Adamax's infinity-norm accumulator.
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect();
        OptimizerState { kind, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every parameter. Parameters absent from `grads` are
    /// treated as having zero gradient.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>, lr: f64) -> Result<(), TrainError> {
        for (name, g) in grads {
            match params.get(name) {
                Some(t) if t.numel() == g.len() => {}
                _ => return Err(TrainError::ShapeMismatch(name.clone())),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).ok_or_else(|| TrainError::ShapeMismatch(name.clone()))?;
            let v = self.v.get_mut(name).ok_or_else(|| TrainError::ShapeMismatch(name.clone()))?;
            if m.len() != p.numel() {
                return Err(TrainError::ShapeMismatch(name.clone()));
            }
            let g = grads.get(name);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i] as f64);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                let delta = match self.kind {
                    OptimizerKind::Adam => {
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPSILON)
                    }
                    OptimizerKind::Adamax => {
                        v[i] = (BETA2 * v[i]).max(gi.abs());
                        (lr / bc1) * m[i] / (v[i] + EPSILON)
                    }
                };
                *x = (*x as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

/// Stops once more than `patience` epochs have passed since the last strict
/// improvement of validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| val_loss < b);
        if improved {
            self.best = Some((epoch, val_loss));
        }
        let best_epoch = self.best.map_or(epoch, |(e, _)| e);
        StopDecision { improved, stop: epoch - best_epoch > self.patience }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: SampleInput,
    pub target: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// JSON array of epoch records.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        s
    }
}

/// Decoder input (target shifted right, starting at the start id) and the
/// per-position targets.
pub fn teacher_forcing(target: &TokenSequence) -> Option<(Vec<u32>, Vec<Option<usize>>)> {
    let real = target.real();
    if real.len() < 2 {
        return None;
    }
    let input = real[..real.len() - 1].to_vec();
    let targets = real[1..].iter().map(|&t| Some(t as usize)).collect();
    Some((input, targets))
}

fn non_finite(epoch: usize, step: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Numerics(n @ NumericsError::NonFinite(_)) => TrainError::NonFinite { epoch, step, detail: n.to_string() },
        other => TrainError::Model(other),
    }
}

/// Summed token loss and token count of one sample, recorded on `scope`.
fn sample_loss(
    scope: &mut Scope<'_>,
    model: &CaptionModel,
    input: &SampleInput,
    target: &TokenSequence,
) -> Result<(crate::numerics::Var, usize), ModelError> {
    let (ids, targets) = teacher_forcing(target).ok_or(ModelError::BadPrefix)?;
    let memory = encode_input(scope, &model.config, input)?;
    let logits = decode_logits(scope, &model.config, &ids, memory)?;
    let ce = scope.tape.cross_entropy_rows(logits, &targets)?;
    Ok((scope.tape.sum(ce)?, targets.len()))
}

/// Mean teacher-forced loss over all real target positions of `samples`.
pub fn mean_loss(model: &CaptionModel, samples: &[Sample]) -> Result<f64, ModelError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in samples {
        let mut tape = GradTape::new();
        let mut scope = Scope::frozen(&mut tape, &model.params, "");
        let (l, n) = sample_loss(&mut scope, model, &s.input, &s.target)?;
        total += scope.tape.value(l).data()[0] as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Loss (mean over the batch's real target positions) and parameter
/// gradients for one batch.
pub fn batch_gradients(model: &CaptionModel, batch: &[(SampleInput, &TokenSequence)]) -> Result<(f64, BTreeMap<String, Vec<f32>>), ModelError> {
    let mut tape = GradTape::new();
    let mut scope = Scope::trainable(&mut tape, &model.params, "");
    let mut total = None;
    let mut count = 0usize;
    for (input, target) in batch {
        let (l, n) = sample_loss(&mut scope, model, input, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => scope.tape.add(acc, l)?,
        });
        count += n;
    }
    let total = total.ok_or(ModelError::NoSources)?;
    let loss = scope.tape.scale(total, 1.0 / count as f32)?;
    scope.tape.backward(loss)?;
    let value = scope.tape.value(loss).data()[0] as f64;
    Ok((value, scope.grads()))
}

/// Trains `model` in place and restores the parameters of the epoch with the
/// lowest validation loss.
pub fn fit(model: &mut CaptionModel, data: &Dataset, cfg: &TrainConfig) -> Result<History, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    for (i, s) in data.train.iter().chain(&data.val).enumerate() {
        if s.target.length < 2 {
            return Err(TrainError::ShortTarget(i));
        }
    }
    model.check_params()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut best_params = model.params.clone();
    let mut records = Vec::new();
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.base_lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(SampleInput, &TokenSequence)> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    let input = match &s.input {
                        SampleInput::Image(img) if rng.gen_bool(cfg.hflip_prob) => SampleInput::Image(augment_hflip(img)),
                        other => other.clone(),
                    };
                    (input, &s.target)
                })
                .collect();
            let (loss, grads) = batch_gradients(model, &batch).map_err(|e| non_finite(epoch, step, e))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, detail: format!("loss {loss}") });
            }
            lr = lr_at(step, total_steps, cfg);
            opt.apply(&mut model.params, &grads, lr)?;
            if model.params.iter().any(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFinite { epoch, step, detail: "parameter update".into() });
            }
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_loss = mean_loss(model, &data.val).map_err(|e| non_finite(epoch, step, e))?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, step, detail: format!("validation loss {val_loss}") });
        }
        records.push(EpochRecord { epoch, train_loss, val_loss, lr });
        let d = stopper.observe(epoch, val_loss);
        if d.improved {
            best_params = model.params.clone();
        }
        if d.stop {
            stopped_early = true;
            break;
        }
    }
    model.params = best_params;
    let best_epoch = stopper.best.map_or(0, |(e, _)| e);
    Ok(History { records, best_epoch, stopped_early })
}
