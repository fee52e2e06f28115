//! CSV plot data and a text summary from an experiment's results directory.

use std::fmt::Write as _;
use std::path::Path;

use biofuse::masking::{AblationCell, CELL_SCHEMA_VERSION};
use biofuse::{Error, Result};

use crate::artifacts::{read_jsonl, seed_dirs, write_file, ABLATION, EVAL};
use crate::experiment::{by_condition, EvalRecord, EVAL_SCHEMA_VERSION};

/// Five-number summary with linearly interpolated quartiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("quartiles need finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Files written by [`write_report`], relative to the report directory.
pub const CONDITIONS_CSV: &str = "conditions.csv";
pub const ZEROED_CSV: &str = "zeroed.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SUMMARY: &str = "summary.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub conditions_csv: String,
    pub zeroed_csv: String,
    pub ablation_csv: Option<String>,
    pub summary: String,
}

/// Builds the report from evaluation (and, when present, ablation) records.
pub fn build_report(evals: &[EvalRecord], ablations: &[(u64, Vec<AblationCell>)]) -> Result<Report> {
    if evals.is_empty() {
        return Err(Error::config("results", "no evaluation records found"));
    }
    let groups = by_condition(evals);
    let mut conditions_csv = String::from("condition,n,min,q1,median,q3,max\n");
    let mut zeroed_csv = String::from("input,mean,std,seeds\n");
    let mut summary = String::from("Accuracy by input condition (per-subject accuracies pooled over seeds)\n\n");
    let _ = writeln!(summary, "{:<20}{:>5}{:>8}{:>8}{:>8}{:>8}{:>8}", "condition", "n", "min", "q1", "median", "q3", "max");
    for (cond, recs) in &groups {
        let pooled: Vec<f64> = recs.iter().flat_map(|r| r.per_subject.iter().copied()).collect();
        let q = quartiles(&pooled)?;
        let _ = writeln!(conditions_csv, "{cond},{},{:.6},{:.6},{:.6},{:.6},{:.6}", pooled.len(), q.min, q.q1, q.median, q.q3, q.max);
        let _ = writeln!(
            summary,
            "{cond:<20}{:>5}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
            pooled.len(),
            q.min,
            q.q1,
            q.median,
            q.q3,
            q.max
        );
        let means: Vec<f64> = recs.iter().map(|r| r.mean).collect();
        let (m, s) = mean_std(&means);
        let _ = writeln!(zeroed_csv, "{cond},{m:.6},{s:.6},{}", means.len());
    }
    summary.push_str("\nAverage accuracy for zeroed input (mean ± std over seeds)\n\n");
    for (cond, recs) in &groups {
        let means: Vec<f64> = recs.iter().map(|r| r.mean).collect();
        let (m, s) = mean_std(&means);
        let _ = writeln!(summary, "{cond:<20}{:>7.1} ± {:.1}", 100.0 * m, 100.0 * s);
    }

    let ablation_csv = if ablations.is_empty() {
        None
    } else {
        let mut csv = String::from("layer,type,mode,n,min,q1,median,q3,max,mean_delta_pct\n");
        let first = &ablations[0].1;
        for (i, c) in first.iter().enumerate() {
            let cells: Vec<&AblationCell> = ablations.iter().filter_map(|(_, cs)| cs.get(i)).collect();
            let pooled: Vec<f64> = cells.iter().flat_map(|c| c.per_subject.iter().copied()).collect();
            let q = quartiles(&pooled)?;
            let deltas: Vec<f64> = cells.iter().filter_map(|c| c.delta_pct).collect();
            let (d, _) = mean_std(&deltas);
            let (Some(l), Some(t), Some(m)) = (c.layer, c.mask_type, c.mode) else { continue };
            let _ = writeln!(
                csv,
                "{l},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
                t.as_str(),
                m.as_str(),
                pooled.len(),
                q.min,
                q.q1,
                q.median,
                q.q3,
                q.max,
                d
            );
        }
        Some(csv)
    };
    Ok(Report {
        conditions_csv,
        zeroed_csv,
        ablation_csv,
        summary,
    })
}

/// Reads `seed-*/eval.jsonl` (and `ablation.jsonl`) under `dir` and writes
/// the report into `dir/report/`.
pub fn write_report(dir: &Path) -> Result<Report> {
    let seeds = seed_dirs(dir)?;
    let mut evals = Vec::new();
    let mut ablations = Vec::new();
    for (seed, sd) in &seeds {
        let e = sd.join(EVAL);
        if e.is_file() {
            evals.extend(read_jsonl::<EvalRecord>(&e, EVAL_SCHEMA_VERSION)?);
        }
        let a = sd.join(ABLATION);
        if a.is_file() {
            let cells: Vec<AblationCell> = read_jsonl(&a, CELL_SCHEMA_VERSION)?;
            // first line is the baseline
            ablations.push((*seed, cells.into_iter().skip(1).collect::<Vec<_>>()));
        }
    }
    if evals.is_empty() {
        return Err(Error::config("results", format!("{} holds no seed-*/{EVAL} files", dir.display())));
    }
    let r = build_report(&evals, &ablations)?;
    let out = dir.join("report");
    write_file(&out.join(CONDITIONS_CSV), &r.conditions_csv)?;
    write_file(&out.join(ZEROED_CSV), &r.zeroed_csv)?;
    if let Some(a) = &r.ablation_csv {
        write_file(&out.join(ABLATION_CSV), a)?;
    }
    write_file(&out.join(SUMMARY), &r.summary)?;
    Ok(r)
}
