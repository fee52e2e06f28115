use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{delta_percent, EdgeMaskSpec, MaskMode, MaskType, SpecHook};
use crate::model::{evaluate, Batch, EvalResult, Model};
use crate::stats::{compare, Method, Significance};

pub const CELL_SCHEMA_VERSION: u32 = 1;
pub const CLS_POLICY: &str = "edges touching the CLS token are never masked";

/// One row of the ablation grid, or the unmasked baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub schema_version: u32,
    /// `None` for the baseline.
    pub mode: Option<MaskMode>,
    #[serde(rename = "type")]
    pub mask_type: Option<MaskType>,
    pub layer: Option<usize>,
    pub subjects: Vec<u32>,
    pub per_subject: Vec<f64>,
    pub mean: f64,
    pub delta_pct: Option<f64>,
    pub u: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_corr: Option<f64>,
    pub symbol: Option<Significance>,
    pub method: Option<Method>,
}

impl AblationCell {
    fn from_eval(e: &EvalResult) -> Self {
        Self {
            schema_version: CELL_SCHEMA_VERSION,
            mode: None,
            mask_type: None,
            layer: None,
            subjects: e.per_subject.iter().map(|s| s.subject).collect(),
            per_subject: e.accuracies(),
            mean: e.mean,
            delta_pct: None,
            u: None,
            p_raw: None,
            p_corr: None,
            symbol: None,
            method: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: AblationCell,
    pub cells: Vec<AblationCell>,
    pub layers: usize,
    pub bonferroni_factor: usize,
    pub cls_policy: String,
    pub weights_checksum: u64,
}

impl AblationReport {
    pub fn cell(&self, mode: MaskMode, mask_type: MaskType, layer: usize) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.mode == Some(mode) && c.mask_type == Some(mask_type) && c.layer == Some(layer))
    }

    /// Baseline line first, then one line per cell.
    pub fn to_jsonl(&self) -> String {
        std::iter::once(&self.baseline)
            .chain(&self.cells)
            .map(|c| serde_json::to_string(c).expect("cells serialize") + "\n")
            .collect()
    }

    /// Fixed-width table: Layer, Type, then Acc. / Sig. / Δ% for each mode.
    pub fn render_table(&self) -> String {
        let modes: Vec<MaskMode> = MaskMode::ALL
            .into_iter()
            .filter(|m| self.cells.iter().any(|c| c.mode == Some(*m)))
            .collect();
        let types: Vec<MaskType> = MaskType::ALL
            .into_iter()
            .filter(|t| self.cells.iter().any(|c| c.mask_type == Some(*t)))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<9}{:<6}", "Layer", "Type");
        for m in &modes {
            let _ = write!(out, "| {:<22}", m.as_str());
        }
        out.push('\n');
        let _ = write!(out, "{:<15}", "");
        for _ in &modes {
            let _ = write!(out, "| {:>6} {:>5} {:>8} ", "Acc.", "Sig.", "Δ%");
        }
        out.push('\n');
        let _ = write!(out, "{:<15}", "Baseline");
        for (i, _) in modes.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "| {:>6.1} {:>5} {:>8} ", 100.0 * self.baseline.mean, "-", "-");
            } else {
                let _ = write!(out, "| {:>6} {:>5} {:>8} ", "-", "-", "-");
            }
        }
        out.push('\n');
        for layer in 1..=self.layers {
            for t in &types {
                let _ = write!(out, "{:<9}{:<6}", format!("L{layer}"), t.as_str());
                for m in &modes {
                    match self.cell(*m, *t, layer) {
                        Some(c) => {
                            let sym = c.symbol.map_or("-", |s| s.as_str());
                            let d = c.delta_pct.map_or("-".to_string(), |d| format!("{d:.1}"));
                            let _ = write!(out, "| {:>6.1} {:>5} {:>8} ", 100.0 * c.mean, sym, d);
                        }
                        None => {
                            let _ = write!(out, "| {:>6} {:>5} {:>8} ", "-", "-", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "\nBonferroni factor {}; {}; Mann-Whitney U on per-subject accuracies (tie and continuity corrected when approximate).",
            self.bonferroni_factor, self.cls_policy
        );
        out
    }
}

/// Bitwise checks `RFB(1) ≡ Individual(1)`, `RFE(L) ≡ Individual(L)` and
/// `RFB(L) ≡ RFE(1)` for every mask type present.
pub fn check_boundaries(r: &AblationReport) -> Result<()> {
    let l = r.layers;
    let pairs = [
        ((MaskMode::Rfb, 1), (MaskMode::Individual, 1)),
        ((MaskMode::Rfe, l), (MaskMode::Individual, l)),
        ((MaskMode::Rfb, l), (MaskMode::Rfe, 1)),
    ];
    for t in MaskType::ALL {
        for ((ma, la), (mb, lb)) in pairs {
            let (Some(a), Some(b)) = (r.cell(ma, t, la), r.cell(mb, t, lb)) else { continue };
            let same = a.per_subject.len() == b.per_subject.len()
                && a.per_subject.iter().zip(&b.per_subject).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(Error::usage(format!(
                    "boundary equivalence violated for {t}: {ma}({la}) {:?} vs {mb}({lb}) {:?}",
                    a.per_subject, b.per_subject
                )));
            }
        }
    }
    Ok(())
}

/// Evaluates every (mode, type, layer) cell with frozen weights. The
/// Bonferroni factor defaults to the number of cells. Cells are spread over
/// `threads` workers; results do not depend on the thread count.
pub fn run_ablation_suite(
    model: &Model,
    batch: &Batch,
    modes: &[MaskMode],
    types: &[MaskType],
    factor: Option<usize>,
    threads: usize,
) -> Result<AblationReport> {
    let layers = model.attention_layers();
    if layers == 0 {
        return Err(Error::usage(format!("{} has no attention layers to mask", model.family().as_str())));
    }
    let checksum = model.params.checksum();
    let base = evaluate(model, batch, None).map_err(|e| e.context("baseline"))?;
    let mut specs = Vec::new();
    for layer in 1..=layers {
        for &t in types {
            for &m in modes {
                specs.push(EdgeMaskSpec::new(m, t, layer, layers)?);
            }
        }
    }
    let run = |s: &EdgeMaskSpec| {
        evaluate(model, batch, Some(&SpecHook(*s)))
            .map_err(|e| e.context(format!("cell {} {} L{}", s.mode, s.mask_type, s.layer)))
    };
    let threads = threads.clamp(1, specs.len().max(1));
    let evals: Vec<Result<EvalResult>> = if threads == 1 {
        specs.iter().map(run).collect()
    } else {
        let chunk = specs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    };
    let factor = factor.unwrap_or(specs.len());
    let mut cells = Vec::with_capacity(specs.len());
    for (s, e) in specs.iter().zip(evals) {
        let e = e?;
        let t = compare(&e.accuracies(), &base.accuracies(), factor)?;
        let mut c = AblationCell::from_eval(&e);
        c.mode = Some(s.mode);
        c.mask_type = Some(s.mask_type);
        c.layer = Some(s.layer);
        c.delta_pct = Some(delta_percent(e.mean, base.mean)?);
        c.u = Some(t.u);
        c.p_raw = Some(t.p_raw);
        c.p_corr = Some(t.p_corr);
        c.symbol = Some(t.symbol);
        c.method = Some(t.method);
        cells.push(c);
    }
    if model.params.checksum() != checksum {
        return Err(Error::usage("model weights changed during the ablation suite"));
    }
    let report = AblationReport {
        baseline: AblationCell::from_eval(&base),
        cells,
        layers,
        bonferroni_factor: factor,
        cls_policy: CLS_POLICY.into(),
        weights_checksum: checksum,
    };
    check_boundaries(&report)?;
    Ok(report)
}
