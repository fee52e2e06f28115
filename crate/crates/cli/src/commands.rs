//! One function per subcommand. Seeds are independent work units and are
//! spread over `threads` workers; each writes only to its own directory.

use std::path::{Path, PathBuf};

use biofuse::dataset::write_dataset;
use biofuse::masking::{run_ablation_suite, AblationReport};
use biofuse::model::{history_jsonl, load_checkpoint, save_checkpoint, Model};
use biofuse::stats::{compare, TestResult};
use biofuse::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::ExperimentConfig;
use crate::experiment::{evaluate_conditions, fit, load_dataset, prepare, to_jsonl, EvalRecord, EVAL_SCHEMA_VERSION};
use crate::report::{write_report, Report};

pub const STATS_SCHEMA_VERSION: u32 = 1;

fn for_each_seed<T: Send>(cfg: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = cfg.threads.clamp(1, cfg.seeds.len());
    if threads == 1 {
        return cfg.seeds.iter().map(|&s| f(s).map_err(|e| e.context(format!("seed {s}")))).collect();
    }
    let chunk = cfg.seeds.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter().map(|&s| f(s).map_err(|e| e.context(format!("seed {s}")))).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("seed worker panicked")).collect()
    })
}

/// Writes the (seed-offset) synthetic dataset of every seed to `seed-<s>/dataset`.
pub fn synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if cfg.data.synth.is_none() {
        return Err(Error::config("data.synth", "`synth` needs a generator config"));
    }
    for_each_seed(cfg, |seed| {
        let timer = Timer::start("synth");
        let dir = cfg.seed_dir(seed);
        let (d, _) = load_dataset(cfg, seed)?;
        let out = dir.join("dataset");
        write_dataset(&d, &out)?;
        timer.finish(&dir)?;
        Ok(out)
    })
}

/// Writes the preprocessed dataset of every seed to `seed-<s>/prepared`,
/// rounded to the on-disk `f32` precision.
pub fn prep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    for_each_seed(cfg, |seed| {
        let timer = Timer::start("prep");
        let dir = cfg.seed_dir(seed);
        let (raw, _) = load_dataset(cfg, seed)?;
        let mut d = if cfg.data.preprocessed { raw } else { raw.preprocess(&cfg.prep)? };
        for t in &mut d.trials {
            for r in &mut t.recordings {
                for ch in &mut r.samples {
                    for v in ch.iter_mut() {
                        *v = *v as f32 as f64;
                    }
                }
            }
        }
        let out = dir.join("prepared");
        write_dataset(&d, &out)?;
        timer.finish(&dir)?;
        Ok(out)
    })
}

/// Outcome of `run` for one seed.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub evals: Vec<EvalRecord>,
    pub ablation: Option<AblationReport>,
}

fn write_ablation(dir: &Path, report: &AblationReport) -> Result<()> {
    write_file(&dir.join(ABLATION), report.to_jsonl())?;
    write_file(&dir.join(ABLATION_TABLE), report.render_table())
}

fn ablate_model(cfg: &ExperimentConfig, model: &Model, test: &biofuse::model::Batch) -> Result<AblationReport> {
    run_ablation_suite(model, test, &cfg.ablation.modes, &cfg.ablation.types, cfg.ablation.factor, cfg.threads)
}

/// Trains, checkpoints and evaluates every seed; runs the ablation grid when enabled.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    for_each_seed(cfg, |seed| {
        let timer = Timer::start("run");
        let dir = cfg.seed_dir(seed);
        let data = prepare(cfg, seed)?;
        let (model, history) = fit(cfg, &data, seed)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&model, dir.join(CHECKPOINT))?;
        write_file(&dir.join(HISTORY), history_jsonl(&history))?;
        let evals = evaluate_conditions(cfg, &model, &data, seed)?;
        write_file(&dir.join(EVAL), to_jsonl(&evals))?;
        let ablation = if cfg.ablation.enabled && model.attention_layers() > 0 {
            let r = ablate_model(cfg, &model, &data.test)?;
            write_ablation(&dir, &r)?;
            Some(r)
        } else {
            None
        };
        write_manifest(cfg, seed, &dir)?;
        timer.finish(&dir)?;
        Ok(RunOutcome { seed, dir, evals, ablation })
    })
}

fn checkpoint_for(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let path = cfg.seed_dir(seed).join(CHECKPOINT);
    if !path.is_file() {
        return Err(Error::config(
            "checkpoint",
            format!("{} not found; run `biofuse run` first", path.display()),
        ));
    }
    load_checkpoint(&path)
}

/// Re-evaluates saved checkpoints.
pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<Vec<EvalRecord>>> {
    cfg.validate()?;
    for_each_seed(cfg, |seed| {
        let timer = Timer::start("eval");
        let dir = cfg.seed_dir(seed);
        let model = checkpoint_for(cfg, seed)?;
        let data = prepare(cfg, seed)?;
        let evals = evaluate_conditions(cfg, &model, &data, seed)?;
        write_file(&dir.join(EVAL), to_jsonl(&evals))?;
        write_manifest(cfg, seed, &dir)?;
        timer.finish(&dir)?;
        Ok(evals)
    })
}

/// Runs the masking grid on saved checkpoints.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationReport>> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    // the grid parallelises over cells; seeds run one after another
    let seeds = std::mem::take(&mut cfg.seeds);
    let mut out = Vec::new();
    for seed in seeds {
        let timer = Timer::start("ablate");
        let dir = cfg.seed_dir(seed);
        let model = checkpoint_for(&cfg, seed)?;
        let data = prepare(&cfg, seed)?;
        let r = ablate_model(&cfg, &model, &data.test).map_err(|e| e.context(format!("seed {seed}")))?;
        write_ablation(&dir, &r)?;
        write_manifest(&cfg, seed, &dir)?;
        timer.finish(&dir)?;
        out.push(r);
    }
    Ok(out)
}

/// One line of `stats.jsonl`: a zeroed condition against the original input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub schema_version: u32,
    pub seed: u64,
    pub condition: String,
    pub reference: String,
    pub mean: f64,
    pub reference_mean: f64,
    #[serde(flatten)]
    pub test: TestResult,
}

/// Mann-Whitney tests of each zeroed condition against the original, per
/// seed, Bonferroni-corrected over the zeroed conditions unless overridden.
pub fn stats(cfg: &ExperimentConfig) -> Result<Vec<StatsRecord>> {
    let rows = for_each_seed(cfg, |seed| {
        let timer = Timer::start("stats");
        let dir = cfg.seed_dir(seed);
        let path = dir.join(EVAL);
        if !path.is_file() {
            return Err(Error::config("results", format!("{} not found; run `biofuse run` first", path.display())));
        }
        let evals: Vec<EvalRecord> = read_jsonl(&path, EVAL_SCHEMA_VERSION)?;
        let base = evals
            .iter()
            .find(|r| r.condition == "original")
            .ok_or_else(|| Error::usage(format!("{} has no `original` condition", path.display())))?;
        let others: Vec<&EvalRecord> = evals.iter().filter(|r| r.condition != "original").collect();
        let factor = cfg.ablation.factor.unwrap_or(others.len().max(1));
        let mut rows = Vec::new();
        for r in others {
            rows.push(StatsRecord {
                schema_version: STATS_SCHEMA_VERSION,
                seed,
                condition: r.condition.clone(),
                reference: base.condition.clone(),
                mean: r.mean,
                reference_mean: base.mean,
                test: compare(&r.per_subject, &base.per_subject, factor)?,
            });
        }
        write_file(&dir.join(STATS), to_jsonl(&rows))?;
        write_manifest(cfg, seed, &dir)?;
        timer.finish(&dir)?;
        Ok(rows)
    })?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::config("results", format!("{} is not a directory", dir.display())));
    }
    write_report(dir)
}
