//! Data loading, training and evaluation for one (experiment, seed) unit.

use std::collections::BTreeMap;

use biofuse::dataset::{read_dataset, split_by_repetition, synth_generate, trial_latents, Dataset, SynthConfig};
use biofuse::model::{evaluate, train, zero_modality_eval, Batch, EpochRecord, EvalResult, InputSpec, Model};
use biofuse::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const EVAL_SCHEMA_VERSION: u32 = 1;

/// Model-ready train and test data for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inputs: InputSpec,
    pub train: Batch,
    pub test: Batch,
    /// Test trials before batching, for label bookkeeping.
    pub test_set: Dataset,
    /// Generator settings when the data is synthetic, seed already offset.
    pub synth: Option<SynthConfig>,
}

impl Prepared {
    /// Per test trial: whether its class is one of the cross-modal pairs.
    pub fn paired_mask(&self) -> Option<Vec<bool>> {
        let s = self.synth.as_ref()?;
        Some(
            self.test_set
                .trials
                .iter()
                .map(|t| trial_latents(s, t.gesture, t.subject, t.repetition)[0].paired)
                .collect(),
        )
    }
}

/// Synthetic data seed for a run seed.
pub fn synth_for_seed(s: &SynthConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed: s.seed.wrapping_add(seed),
        ..s.clone()
    }
}

/// Raw (or already preprocessed) dataset for `seed`.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Option<SynthConfig>)> {
    match (&cfg.data.path, &cfg.data.synth) {
        (Some(p), _) => Ok((read_dataset(p).map_err(|e| e.context("data.path"))?, None)),
        (None, Some(s)) => {
            let s = synth_for_seed(s, seed);
            Ok((synth_generate(&s)?, Some(s)))
        }
        (None, None) => Err(Error::config("data.path", "no dataset configured")),
    }
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (raw, synth) = load_dataset(cfg, seed)?;
    let d = if cfg.data.preprocessed { raw } else { raw.preprocess(&cfg.prep).map_err(|e| e.context("preprocessing"))? };
    let names: Vec<String> = d.streams.iter().map(|s| s.name.clone()).collect();
    cfg.zero_streams(&names)?;
    let (tr, te) = split_by_repetition(&d, &cfg.split).map_err(|e| e.context("split"))?;
    Ok(Prepared {
        inputs: Batch::input_spec(&tr)?,
        train: Batch::from_dataset(&tr).map_err(|e| e.context("training set"))?,
        test: Batch::from_dataset(&te).map_err(|e| e.context("test set"))?,
        test_set: te,
        synth,
    })
}

/// Builds and trains a model; init and training draw from one stream seeded
/// by `seed`.
pub fn fit(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<(Model, Vec<EpochRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg.model.clone(), data.inputs.clone(), &mut rng)?;
    let history = train(&mut model, &data.train, Some(&data.test), &mut rng).map_err(|e| e.context(format!("training seed {seed}")))?;
    Ok((model, history))
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub seed: u64,
    /// `original` or `zeroed-<stream>`.
    pub condition: String,
    pub zeroed: Vec<String>,
    pub subjects: Vec<u32>,
    pub per_subject: Vec<f64>,
    pub mean: f64,
    /// Accuracy restricted to cross-modal classes (synthetic data only).
    pub paired_mean: Option<f64>,
}

fn paired_accuracy(model: &Model, data: &Prepared, batch: &Batch) -> Result<Option<f64>> {
    let Some(mask) = data.paired_mask() else { return Ok(None) };
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, &batch.select(&idx), None)?.mean))
}

fn record(seed: u64, condition: String, zeroed: Vec<String>, e: &EvalResult, paired: Option<f64>) -> EvalRecord {
    EvalRecord {
        schema_version: EVAL_SCHEMA_VERSION,
        seed,
        condition,
        zeroed,
        subjects: e.per_subject.iter().map(|s| s.subject).collect(),
        per_subject: e.accuracies(),
        mean: e.mean,
        paired_mean: paired,
    }
}

/// The original condition, then one condition per zeroed stream.
pub fn evaluate_conditions(cfg: &ExperimentConfig, model: &Model, data: &Prepared, seed: u64) -> Result<Vec<EvalRecord>> {
    let names: Vec<String> = model.inputs.streams.iter().map(|s| s.name.clone()).collect();
    let zero = cfg.zero_streams(&names)?;
    let base = evaluate(model, &data.test, None)?;
    let mut out = vec![record(seed, "original".into(), Vec::new(), &base, paired_accuracy(model, data, &data.test)?)];
    for z in zero {
        let e = zero_modality_eval(model, &data.test, &[z.as_str()])?;
        let mut b = data.test.clone();
        b.zero_stream(names.iter().position(|n| *n == z).expect("checked by zero_streams"))?;
        let paired = paired_accuracy(model, data, &b)?;
        out.push(record(seed, format!("zeroed-{z}"), vec![z], &e, paired));
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

/// Groups records by condition, keeping first-seen order.
pub fn by_condition(records: &[EvalRecord]) -> Vec<(String, Vec<&EvalRecord>)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(r.condition.as_str()) {
            order.push(r.condition.clone());
        }
        groups.entry(&r.condition).or_default().push(r);
    }
    order
        .into_iter()
        .map(|c| {
            let g = groups.remove(c.as_str()).unwrap_or_default();
            (c, g)
        })
        .collect()
}
