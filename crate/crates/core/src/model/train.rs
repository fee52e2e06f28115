use std::collections::BTreeMap;

use biofuse_tensor::{AdamW, AdamWConfig, Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::arch::Model;
use crate::model::config::{Family, InputSpec, StreamShape};
use crate::model::layers::{AttentionHook, Pass};

pub const HISTORY_SCHEMA_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 128;

/// Model-ready tensors: one `[N, C, T]` block per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub streams: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
}

impl Batch {
    /// Requires every recording of a stream to have the same length.
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        if d.trials.is_empty() {
            return Err(Error::usage("dataset has no trials"));
        }
        let n = d.trials.len();
        let mut streams = Vec::with_capacity(d.streams.len());
        for (s, info) in d.streams.iter().enumerate() {
            let len = d.trials[0].recordings[s].len();
            let c = info.channels;
            let mut data = Vec::with_capacity(n * c * len);
            for t in &d.trials {
                let r = &t.recordings[s];
                if r.len() != len {
                    return Err(Error::usage(format!(
                        "stream `{}` has recordings of {} and {len} samples; crop before training",
                        info.name,
                        r.len()
                    )));
                }
                for ch in &r.samples {
                    data.extend_from_slice(ch);
                }
            }
            streams.push(Tensor::new([n, c, len], data)?);
        }
        Ok(Self {
            streams,
            labels: d.trials.iter().map(|t| t.gesture as usize).collect(),
            subjects: d.trials.iter().map(|t| t.subject).collect(),
        })
    }

    pub fn input_spec(d: &Dataset) -> Result<InputSpec> {
        let first = d.trials.first().ok_or_else(|| Error::usage("dataset has no trials"))?;
        Ok(InputSpec {
            streams: d
                .streams
                .iter()
                .zip(&first.recordings)
                .map(|(s, r)| StreamShape {
                    name: s.name.clone(),
                    modality: s.modality,
                    channels: s.channels,
                    samples: r.len(),
                })
                .collect(),
            classes: d.classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let streams = self
            .streams
            .iter()
            .map(|t| {
                let row: usize = t.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(idx.len() * row);
                for &i in idx {
                    data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                Tensor::new(shape, data).expect("row selection keeps the shape consistent")
            })
            .collect();
        Batch {
            streams,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
        }
    }

    /// Replaces one stream's input by zeros.
    pub fn zero_stream(&mut self, stream: usize) -> Result<()> {
        let t = self
            .streams
            .get_mut(stream)
            .ok_or_else(|| Error::usage(format!("no input stream {stream}")))?;
        t.data_mut().fill(0.0);
        Ok(())
    }

    /// Drops all streams but `keep`, for single-stream models.
    pub fn only_stream(&self, keep: usize) -> Result<Batch> {
        let t = self
            .streams
            .get(keep)
            .ok_or_else(|| Error::usage(format!("no input stream {keep}")))?;
        Ok(Batch {
            streams: vec![t.clone()],
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
        })
    }
}

/// `λ(t) = min(1, t / T)`.
pub fn anneal_lambda(epoch: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::usage("anneal horizon must be positive"));
    }
    Ok((epoch as f64 / horizon as f64).min(1.0))
}

/// `λ·cls + (1 − λ)·avg`. At λ = 1 the avg term is scaled by exactly zero, so
/// its gradient vanishes.
pub fn annealed_loss(g: &mut Graph, cls: Var, avg: Var, epoch: usize, horizon: usize) -> Result<Var> {
    let lambda = anneal_lambda(epoch, horizon)?;
    let a = g.scale(cls, lambda)?;
    let b = g.scale(avg, 1.0 - lambda)?;
    Ok(g.add(a, b)?)
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub loss: f64,
    pub loss_cls: f64,
    pub loss_avg: Option<f64>,
    pub lambda: Option<f64>,
    /// L2 norm of the loss gradient w.r.t. the mean-token head, over the epoch's steps.
    pub avg_head_grad_norm: Option<f64>,
    pub test_acc: Option<f64>,
}

fn divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence { epoch },
        other => other,
    }
}

struct StepStats {
    loss: f64,
    loss_cls: f64,
    loss_avg: Option<f64>,
    avg_sq: f64,
}

fn train_step(model: &mut Model, opt: &mut AdamW, batch: &Batch, epoch: usize, rng: &mut ChaCha8Rng) -> Result<StepStats> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let inputs: Vec<Var> = batch.streams.iter().map(|t| g.constant(t.clone())).collect();
    let mut pass = Pass::train(rng);
    let out = model.forward(&mut g, &bound, &inputs, &mut pass)?;
    let cls = g.cross_entropy(out.logits, &batch.labels)?;
    let (loss, loss_avg) = match out.avg_logits {
        Some(avg_logits) => {
            let avg = g.cross_entropy(avg_logits, &batch.labels)?;
            let total = annealed_loss(&mut g, cls, avg, epoch, model.config.anneal_horizon)?;
            (total, Some(g.value(avg).item()?))
        }
        None => (cls, None),
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    let mut grads = g.backward(loss)?;
    let mut avg_sq = 0.0;
    if let Some(ids) = model.avg_head_params() {
        for id in ids {
            avg_sq += grads.wrt(bound.var(id)).sq_norm();
        }
    }
    let gs: Vec<Tensor> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    if let Some(i) = gs.iter().position(|t| !t.is_finite()) {
        return Err(Error::Divergence { epoch }.context(format!("gradient of `{}`", model.params.names()[i])));
    }
    opt.step(model.params.tensors_mut(), &gs)?;
    Ok(StepStats {
        loss: value,
        loss_cls: g.value(cls).item()?,
        loss_avg,
        avg_sq,
    })
}

/// Trains in place with AdamW. Epochs are 0-based. Test accuracy (mean over
/// subjects) is recorded every `eval_every` epochs and at the final epoch.
pub fn train(model: &mut Model, train: &Batch, test: Option<&Batch>, rng: &mut ChaCha8Rng) -> Result<Vec<EpochRecord>> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let is_iso = cfg.family == Family::IsoNet;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let (mut loss, mut loss_cls, mut loss_avg, mut avg_sq) = (0.0, 0.0, 0.0, 0.0);
        match cfg.batch_size {
            Some(bs) if bs < train.len() => {
                order.shuffle(rng);
                for chunk in order.chunks(bs) {
                    let b = train.select(chunk);
                    let s = train_step(model, &mut opt, &b, epoch, rng).map_err(|e| divergence(e, epoch))?;
                    let w = chunk.len() as f64 / train.len() as f64;
                    loss += w * s.loss;
                    loss_cls += w * s.loss_cls;
                    loss_avg += w * s.loss_avg.unwrap_or(0.0);
                    avg_sq += s.avg_sq;
                }
            }
            _ => {
                let s = train_step(model, &mut opt, train, epoch, rng).map_err(|e| divergence(e, epoch))?;
                (loss, loss_cls, loss_avg, avg_sq) = (s.loss, s.loss_cls, s.loss_avg.unwrap_or(0.0), s.avg_sq);
            }
        }
        let last = epoch + 1 == cfg.epochs;
        let test_acc = match test {
            Some(t) if epoch % cfg.eval_every == 0 || last => Some(evaluate(model, t, None)?.mean),
            _ => None,
        };
        history.push(EpochRecord {
            schema_version: HISTORY_SCHEMA_VERSION,
            epoch,
            loss,
            loss_cls,
            loss_avg: is_iso.then_some(loss_avg),
            lambda: if is_iso { Some(anneal_lambda(epoch, cfg.anneal_horizon)?) } else { None },
            avg_head_grad_norm: is_iso.then_some(avg_sq.sqrt()),
            test_acc,
        });
    }
    Ok(history)
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history records serialize") + "\n")
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub subject: u32,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_subject: Vec<SubjectAccuracy>,
    /// Mean of the per-subject accuracies.
    pub mean: f64,
}

impl EvalResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_subject.iter().map(|s| s.accuracy).collect()
    }
}

/// Inference logits `[N, K]` in chunks; weights are only read.
pub fn predict_logits(model: &Model, batch: &Batch, hook: Option<&dyn AttentionHook>) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::usage("empty evaluation set"));
    }
    let k = model.classes();
    let mut out = Vec::with_capacity(batch.len() * k);
    // dropout is off at inference; the rng is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = if chunk.len() == batch.len() { batch.clone() } else { batch.select(chunk) };
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let inputs: Vec<Var> = part.streams.iter().map(|t| g.constant(t.clone())).collect();
        let mut pass = Pass::eval(&mut rng).with_hook(hook);
        let f = model.forward(&mut g, &bound, &inputs, &mut pass)?;
        out.extend_from_slice(g.value(f.logits).data());
    }
    Ok(Tensor::new([batch.len(), k], out)?)
}

/// Argmax with ties broken towards the lowest class index.
pub fn predict(model: &Model, batch: &Batch, hook: Option<&dyn AttentionHook>) -> Result<Vec<usize>> {
    Ok(predict_logits(model, batch, hook)?.argmax_rows())
}

pub fn accuracy_by_subject(pred: &[usize], labels: &[usize], subjects: &[u32]) -> Result<EvalResult> {
    if pred.is_empty() {
        return Err(Error::usage("empty evaluation set"));
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((p, l), s) in pred.iter().zip(labels).zip(subjects) {
        let e = tally.entry(*s).or_default();
        e.0 += (p == l) as usize;
        e.1 += 1;
    }
    let per_subject: Vec<SubjectAccuracy> = tally
        .into_iter()
        .map(|(subject, (correct, total))| SubjectAccuracy {
            subject,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect();
    let mean = per_subject.iter().map(|s| s.accuracy).sum::<f64>() / per_subject.len() as f64;
    Ok(EvalResult { per_subject, mean })
}

pub fn evaluate(model: &Model, batch: &Batch, hook: Option<&dyn AttentionHook>) -> Result<EvalResult> {
    let pred = predict(model, batch, hook)?;
    accuracy_by_subject(&pred, &batch.labels, &batch.subjects)
}

/// Evaluates with the named streams' inputs replaced by zeros.
pub fn zero_modality_eval(model: &Model, batch: &Batch, zero: &[&str]) -> Result<EvalResult> {
    let mut b = batch.clone();
    for name in zero {
        let s = model
            .inputs
            .streams
            .iter()
            .position(|s| s.name == *name)
            .ok_or_else(|| Error::usage(format!("model has no input stream `{name}`")))?;
        b.zero_stream(s)?;
    }
    evaluate(model, &b, None)
}
