//! Deterministic single-threaded training and evaluation.
//!
//! Parameters and momentum buffers are rounded to `f32` after every update,
//! so a `TLKT1` checkpoint captures the optimizer state exactly and a resumed
//! run continues bit-for-bit.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MOMENTUM_PREFIX: &str = "optim/momentum/";
pub const STEP_KEY: &str = "meta/step";

fn default_momentum() -> f64 {
    0.9
}

fn default_clip() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Cosine decay of the learning rate to zero over `steps`.
    #[serde(default = "default_true")]
    pub cosine: bool,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Full-dataset evaluation interval used for steps-to-target; 0 disables it.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr,
            momentum: default_momentum(),
            cosine: true,
            steps,
            batch_size,
            seed,
            clip_norm: default_clip(),
            eval_every: default_eval_every(),
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm", "must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine {
            0.5 * self.lr * (1.0 + (PI * step as f64 / self.steps as f64).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// One row per step (batch loss and accuracy before the update), then a
    /// final row at `step == steps` evaluating the final weights on the full dataset.
    pub log: Vec<MetricRow>,
    /// Periodic full-dataset evaluations.
    pub evals: Vec<MetricRow>,
    pub final_metrics: Metrics,
}

impl TrainOutcome {
    /// First evaluated step reaching `target` accuracy.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.evals
            .iter()
            .find(|r| r.accuracy >= target)
            .map(|r| r.step)
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.log {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Sample indices of `step`'s batch. Each epoch is a fresh permutation seeded
/// by `(seed, epoch)`, so any step's batch is computable without replay.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
        pos += 1;
    }
    out
}

fn check_compat(model: &Model, data: &Dataset) -> Result<()> {
    if model.config.input_dims() != data.dims {
        return Err(Error::Dataset(format!(
            "dataset samples are {:?}, model expects {:?}",
            data.dims,
            model.config.input_dims()
        )));
    }
    if data.classes != model.config.head.classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model head has {}",
            data.classes, model.config.head.classes
        )));
    }
    Ok(())
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `model` over all of `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    check_compat(model, data)?;
    const CHUNK: usize = 64;
    let (mut loss, mut hits) = (0.0, 0.0);
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let samples: Vec<Tensor> = idx.iter().map(|&i| data.sample(i)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let logits = model.forward_batch(&mut g, &p, &samples)?;
        let l = g.cross_entropy(logits, &labels)?;
        let lv = g.value(l).item();
        if !lv.is_finite() {
            return Err(non_finite(&g));
        }
        loss += lv * idx.len() as f64;
        hits += accuracy(g.value(logits), &labels) * idx.len() as f64;
    }
    let n = data.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: hits / n,
    })
}

fn non_finite(g: &Graph) -> Error {
    Error::NonFinite {
        tensor: g.first_non_finite().unwrap_or_else(|| "loss".into()),
    }
}

/// Optimizer state alongside the model.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub momentum: Vec<Tensor>,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        TrainState {
            step: 0,
            momentum: model.params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// Writes parameters, momentum buffers and the step counter.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, state: &TrainState) -> Result<()> {
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| format!("{MOMENTUM_PREFIX}{n}"))
        .collect();
    let step = Tensor::scalar(state.step as f64);
    let entries = model
        .params
        .iter()
        .chain(names.iter().map(String::as_str).zip(&state.momentum))
        .chain(std::iter::once((STEP_KEY, &step)));
    checkpoint::save(path, entries)
}

/// Copies checkpoint tensors into `model`, failing without modification if
/// any parameter is missing or has the wrong shape.
pub fn load_weights(model: &mut Model, entries: &[(String, Tensor)]) -> Result<()> {
    let mut problems = Vec::new();
    let lookup: std::collections::HashMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, t) in model.params.iter() {
        match lookup.get(name) {
            None => problems.push(format!("{name} (missing)")),
            Some(c) if c.shape() != t.shape() => problems.push(format!(
                "{name} (checkpoint {:?}, model {:?})",
                c.shape(),
                t.shape()
            )),
            Some(_) => {}
        }
    }
    let known: HashSet<&str> = model.params.iter().map(|(n, _)| n).collect();
    for (name, _) in entries {
        let aux = name.starts_with(MOMENTUM_PREFIX) || name.starts_with("meta/");
        if !aux && !known.contains(name.as_str()) {
            problems.push(format!("{name} (unexpected)"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match the model: {}",
            problems.join(", ")
        )));
    }
    for (name, t) in model.params.iter_mut() {
        *t = lookup[name].clone();
    }
    Ok(())
}

/// Loads weights and optimizer state from a training checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut Model) -> Result<TrainState> {
    let entries = checkpoint::load(path)?;
    load_weights(model, &entries)?;
    let lookup: std::collections::HashMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut momentum = Vec::new();
    for (name, t) in model.params.iter() {
        let key = format!("{MOMENTUM_PREFIX}{name}");
        match lookup.get(key.as_str()) {
            Some(m) if m.shape() == t.shape() => momentum.push((*m).clone()),
            _ => return Err(Error::Checkpoint(format!("no optimizer state for {name}"))),
        }
    }
    let step = lookup
        .get(STEP_KEY)
        .map(|t| t.item() as usize)
        .ok_or_else(|| Error::Checkpoint(format!("missing {STEP_KEY}")))?;
    Ok(TrainState { step, momentum })
}

/// One SGD-momentum step on `batch`; returns the batch metrics before the update.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    batch: &[usize],
) -> Result<Metrics> {
    let samples: Vec<Tensor> = batch.iter().map(|&i| data.sample(i)).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let logits = model.forward_batch(&mut g, &p, &samples)?;
    let loss = g.cross_entropy(logits, &labels)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(non_finite(&g));
    }
    let acc = accuracy(g.value(logits), &labels);
    let grads = g.backward(loss)?;
    let mut gs: Vec<Tensor> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    let norm = gs
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            tensor: "gradient".into(),
        });
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        gs.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    let lr = cfg.lr_at(state.step);
    for (((_, param), m), grad) in model.params.iter_mut().zip(&mut state.momentum).zip(&gs) {
        for ((w, v), g) in param.data_mut().iter_mut().zip(m.data_mut()).zip(grad.data()) {
            *v = cfg.momentum * *v + g;
            *w -= lr * *v;
        }
        param.round_to_f32();
        m.round_to_f32();
    }
    state.step += 1;
    Ok(Metrics {
        loss: lv,
        accuracy: acc,
    })
}

/// Trains `model` from `state` to `cfg.steps`, writing the checkpoint (if
/// configured) at the end.
pub fn train_from(
    model: &mut Model,
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(TrainOutcome, TrainState)> {
    cfg.validate()?;
    check_compat(model, data)?;
    if state.step > cfg.steps {
        return Err(Error::config(
            "steps",
            format!("checkpoint is at step {}, beyond {}", state.step, cfg.steps),
        ));
    }
    for (_, t) in model.params.iter_mut() {
        t.round_to_f32();
    }
    let mut log = Vec::new();
    let mut evals = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
            let m = evaluate(model, data)?;
            evals.push(MetricRow {
                step,
                loss: m.loss,
                accuracy: m.accuracy,
            });
        }
        let batch = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
        let m = train_step(model, &mut state, cfg, data, &batch)?;
        log.push(MetricRow {
            step,
            loss: m.loss,
            accuracy: m.accuracy,
        });
    }
    let final_metrics = evaluate(model, data)?;
    let last = MetricRow {
        step: cfg.steps,
        loss: final_metrics.loss,
        accuracy: final_metrics.accuracy,
    };
    log.push(last);
    evals.push(last);
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, model, &state)?;
    }
    Ok((
        TrainOutcome {
            log,
            evals,
            final_metrics,
        },
        state,
    ))
}

/// Trains `model` from scratch.
pub fn train(model: &mut Model, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let state = TrainState::fresh(model);
    Ok(train_from(model, state, cfg, data)?.0)
}

/// Builds the model from `model_cfg` (initialized from `cfg.seed`) and trains it.
pub fn train_config(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<(Model, TrainOutcome)> {
    let mut model = build_model(model_cfg, cfg.seed)?;
    let out = train(&mut model, cfg, data)?;
    Ok((model, out))
}

/// Rebuilds the model described by `model_cfg`, loads `checkpoint` and evaluates it.
pub fn evaluate_checkpoint(model_cfg: &ModelConfig, path: impl AsRef<Path>, data: &Dataset) -> Result<Metrics> {
    let mut model = build_model(model_cfg, 0)?;
    load_weights(&mut model, &checkpoint::load(path)?)?;
    evaluate(&model, data)
}
