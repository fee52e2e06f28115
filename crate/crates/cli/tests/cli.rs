use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use biofuse::dataset::read_dataset;
use biofuse::Error;
use biofuse_cli::artifacts::*;
use biofuse_cli::commands;
use biofuse_cli::report::{build_report, quartiles};
use biofuse_cli::experiment::EvalRecord;
use biofuse_cli::{exit_code, ExperimentConfig};

const TINY: &str = r#"
name = "tiny"
seeds = [0, 1]

[data.synth]
subjects = 2
cross_modal_fraction = 0.5

[prep]
target_fs = 100.0
emg_band = [10.0, 400.0]

[model]
family = "isonet"
embed_dim = 8
heads = 2
layers = 2
ffn_dim = 8
epochs = 4
anneal_horizon = 2
lr = 0.002

[ablation]
enabled = true
"#;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(TINY, Path::new(".")).unwrap();
    c.out = out.to_path_buf();
    c
}

fn config_field(e: Error) -> String {
    fn root(e: &Error) -> &Error {
        match e {
            Error::Context { source, .. } => root(source),
            other => other,
        }
    }
    match root(&e) {
        Error::Config { field, .. } => field.clone(),
        _ => panic!("expected a config error, got {e}"),
    }
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for (text, key) in [
        (format!("{TINY}\nbogus = 1\n"), "bogus"),
        (TINY.replace("lr = 0.002", "lr = 0.002\nlearning_rate = 1"), "learning_rate"),
        (TINY.replace("subjects = 2", "subjects = 2\nextra = 3"), "extra"),
    ] {
        let e = ExperimentConfig::from_toml(&text, Path::new(".")).unwrap_err();
        assert!(e.is_config());
        assert_eq!(exit_code(&e), 2);
        assert!(e.to_string().contains(key), "{e}");
    }
}

#[test]
fn validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.seeds.clear();
    assert_eq!(config_field(c.validate().unwrap_err()), "seeds");

    let mut c = tiny(dir.path());
    c.data.synth = None;
    assert_eq!(config_field(c.validate().unwrap_err()), "data.path");
    c.data.path = Some(dir.path().join("missing"));
    assert_eq!(config_field(c.validate().unwrap_err()), "data.path");

    let mut c = tiny(dir.path());
    c.name = "../escape".into();
    assert_eq!(config_field(c.validate().unwrap_err()), "name");

    let mut c = tiny(dir.path());
    c.eval.zero = vec!["force".into()];
    c.validate().unwrap();
    assert_eq!(config_field(commands::run(&c).unwrap_err()), "eval.zero");
}

fn primary_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != TIMESTAMPS)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn run_writes_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = commands::run(&tiny(a.path())).unwrap();
    let rb = commands::run(&tiny(b.path())).unwrap();
    assert_eq!(ra.len(), 2);
    for (x, y) in ra.iter().zip(&rb) {
        let fx = primary_files(&x.dir);
        let names: Vec<&str> = fx.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, [ABLATION, ABLATION_TABLE, CHECKPOINT, EVAL, HISTORY, MANIFEST]);
        assert_eq!(fx, primary_files(&y.dir));
        assert!(x.dir.join(TIMESTAMPS).is_file());
        let conds: Vec<&str> = x.evals.iter().map(|e| e.condition.as_str()).collect();
        assert_eq!(conds, ["original", "zeroed-emg", "zeroed-acc"]);
        assert!(x.evals.iter().all(|e| e.paired_mean.is_some()));
    }
    // different seeds, different weights
    assert_ne!(fs::read(ra[0].dir.join(CHECKPOINT)).unwrap(), fs::read(ra[1].dir.join(CHECKPOINT)).unwrap());

    let m: Manifest = serde_json::from_str(&fs::read_to_string(ra[0].dir.join(MANIFEST)).unwrap()).unwrap();
    let eval = fs::read(ra[0].dir.join(EVAL)).unwrap();
    let rec = m.files.iter().find(|f| f.name == EVAL).unwrap();
    assert_eq!(rec.crc32, crc32fast::hash(&eval));
    for line in fs::read_to_string(ra[0].dir.join(HISTORY)).unwrap().lines() {
        assert!(line.contains("\"schema_version\":1"));
    }
}

#[test]
fn eval_ablate_stats_and_report_on_saved_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.ablation.enabled = false;
    assert_eq!(config_field(commands::ablate(&c).unwrap_err()), "checkpoint");
    assert_eq!(config_field(commands::eval(&c).unwrap_err()), "checkpoint");
    let runs = commands::run(&c).unwrap();

    let evals = commands::eval(&c).unwrap();
    assert_eq!(evals[0], runs[0].evals);

    c.ablation.factor = Some(10);
    c.threads = 2;
    let reports = commands::ablate(&c).unwrap();
    assert_eq!(reports[0].cells.len(), 2 * 2 * 3);
    assert_eq!(reports[0].bonferroni_factor, 10);
    let lines = fs::read_to_string(runs[0].dir.join(ABLATION)).unwrap();
    assert_eq!(lines.lines().count(), 13);

    let stats = commands::stats(&c).unwrap();
    assert_eq!(stats.len(), 4);
    assert!(stats.iter().all(|s| s.reference == "original"));

    let r = commands::report(&c.experiment_dir()).unwrap();
    let rows: Vec<&str> = r.zeroed_csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["input", "original", "zeroed-emg", "zeroed-acc"]);
    assert_eq!(r.ablation_csv.as_ref().unwrap().lines().count(), 13);
    for f in ["conditions.csv", "zeroed.csv", "ablation.csv", "summary.txt"] {
        assert!(c.experiment_dir().join("report").join(f).is_file(), "{f}");
    }

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(config_field(commands::report(empty.path()).unwrap_err()), "results");
}

#[test]
fn synth_and_prep_outputs_feed_later_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.seeds = vec![3];
    let raw = commands::synth(&c).unwrap();
    let prepared = commands::prep(&c).unwrap();
    let d = read_dataset(&prepared[0]).unwrap();
    assert_eq!(d.streams[0].fs, 100.0);

    // a run on the stored raw data matches the generated-on-the-fly run
    let mut from_disk = c.clone();
    from_disk.name = "disk".into();
    from_disk.data.synth = None;
    from_disk.data.path = Some(raw[0].clone());
    let a = commands::run(&c).unwrap();
    let b = commands::run(&from_disk).unwrap();
    let acc = |r: &commands::RunOutcome| r.evals.iter().map(|e| (e.condition.clone(), e.per_subject.clone())).collect::<Vec<_>>();
    assert_eq!(acc(&a[0]), acc(&b[0]));
    // pairing bookkeeping only exists for generated data
    assert!(a[0].evals[0].paired_mean.is_some());
    assert!(b[0].evals[0].paired_mean.is_none());
    assert_eq!(fs::read(a[0].dir.join(CHECKPOINT)).unwrap(), fs::read(b[0].dir.join(CHECKPOINT)).unwrap());
}

#[test]
fn quartiles_and_degenerate_report() {
    let q = quartiles(&[0.1, 0.4, 0.2, 0.3, 0.5]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (0.1, 0.2, 0.3, 0.4, 0.5));
    let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
    assert!(quartiles(&[]).is_err());

    let rec = |cond: &str, acc: f64| EvalRecord {
        schema_version: 1,
        seed: 0,
        condition: cond.into(),
        zeroed: Vec::new(),
        subjects: vec![7],
        per_subject: vec![acc],
        mean: acc,
        paired_mean: None,
    };
    let r = build_report(&[rec("original", 0.8), rec("zeroed-a", 0.6), rec("zeroed-b", 0.5)], &[]).unwrap();
    let lines: Vec<&str> = r.conditions_csv.lines().collect();
    assert_eq!(lines[1], "original,1,0.800000,0.800000,0.800000,0.800000,0.800000");
    assert_eq!(lines.len(), 4);
    assert!(build_report(&[], &[]).unwrap_err().is_config());
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_biofuse"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let run = |args: &[&str]| {
        let o = Command::new(bin()).args(args).output().unwrap();
        (o.status.code(), String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let (code, err) = run(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, Some(2), "{err}");
    assert!(err.contains("checkpoint"));

    let (code, err) = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code, Some(0), "{err}");
    let ckpt = out.join("tiny/seed-5").join(CHECKPOINT);
    assert!(ckpt.is_file());

    // a corrupted checkpoint is a runtime failure, not a config problem
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let (code, err) = run(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code, Some(1), "{err}");

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, "name = \"m\"\n[data]\npath = \"nowhere\"\n").unwrap();
    let (code, err) = run(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(code, Some(2));
    assert!(err.contains("data.path"), "{err}");

    let (code, _) = run(&["report", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(code, Some(2));
    let (code, _) = run(&["frobnicate"]);
    assert_eq!(code, Some(2));
}
