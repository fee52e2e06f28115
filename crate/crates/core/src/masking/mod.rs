//! Attention-edge masking at inference.
//!
//! Edges `(i, j)` (query `i`, key `j`) are unimodal when both tokens come from
//! the same stream, cross-modal when they come from different streams, and
//! CLS edges when either end is the CLS token. CLS edges are never masked by
//! an [`EdgeMaskSpec`], so the readout path always exists. Self edges count
//! as unimodal. Masks are shared by all heads.

mod suite;

use std::collections::BTreeSet;
use std::fmt;

use biofuse_tensor::Mask;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_tags, AttentionHook, Tag};

pub use suite::{check_boundaries, run_ablation_suite, AblationCell, AblationReport, CELL_SCHEMA_VERSION, CLS_POLICY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Only layer ℓ.
    Individual,
    /// Range from the beginning: layers 1..=ℓ.
    Rfb,
    /// Range from the end: layers ℓ..=L.
    Rfe,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Individual, MaskMode::Rfb, MaskMode::Rfe];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Individual => "Individual",
            MaskMode::Rfb => "RFB",
            MaskMode::Rfe => "RFE",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskType {
    Unimodal,
    CrossModal,
}

impl MaskType {
    pub const ALL: [MaskType; 2] = [MaskType::Unimodal, MaskType::CrossModal];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskType::Unimodal => "Uni",
            MaskType::CrossModal => "Cross",
        }
    }

    fn edge_class(self) -> EdgeClass {
        match self {
            MaskType::Unimodal => EdgeClass::Unimodal,
            MaskType::CrossModal => EdgeClass::CrossModal,
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeMaskSpec {
    pub mode: MaskMode,
    pub mask_type: MaskType,
    pub layer: usize,
    pub total_layers: usize,
}

impl EdgeMaskSpec {
    pub fn new(mode: MaskMode, mask_type: MaskType, layer: usize, total_layers: usize) -> Result<Self> {
        let s = Self {
            mode,
            mask_type,
            layer,
            total_layers,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer == 0 || self.layer > self.total_layers {
            return Err(Error::usage(format!(
                "mask layer {} outside 1..={}",
                self.layer, self.total_layers
            )));
        }
        Ok(())
    }
}

/// Selected layers, 1-based.
pub fn layers_for(spec: &EdgeMaskSpec) -> BTreeSet<usize> {
    let (l, total) = (spec.layer, spec.total_layers);
    match spec.mode {
        MaskMode::Individual => BTreeSet::from([l]),
        MaskMode::Rfb => (1..=l).collect(),
        MaskMode::Rfe => (l..=total).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    Unimodal,
    CrossModal,
    Cls,
}

/// Classification of all `T × T` edges of one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgePartition {
    tokens: usize,
    classes: Vec<EdgeClass>,
}

impl EdgePartition {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn class(&self, i: usize, j: usize) -> EdgeClass {
        self.classes[i * self.tokens + j]
    }

    pub fn edges(&self, class: EdgeClass) -> Vec<(usize, usize)> {
        (0..self.tokens)
            .flat_map(|i| (0..self.tokens).map(move |j| (i, j)))
            .filter(|&(i, j)| self.class(i, j) == class)
            .collect()
    }

    pub fn count(&self, class: EdgeClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }

    /// Mask `[heads, T, T]` that is true on every edge of the given classes.
    pub fn mask(&self, select: &[EdgeClass], heads: usize) -> Mask {
        let one: Vec<bool> = self.classes.iter().map(|c| select.contains(c)).collect();
        let bits = one.iter().copied().cycle().take(heads * one.len()).collect();
        Mask::new([heads, self.tokens, self.tokens], bits).expect("mask size matches its shape")
    }
}

/// Needs exactly one CLS tag, in front.
pub fn classify_edges(tags: &[Tag]) -> Result<EdgePartition> {
    check_tags(tags)?;
    let t = tags.len();
    let classes = (0..t * t)
        .map(|k| {
            let (a, b) = (tags[k / t], tags[k % t]);
            match (a, b) {
                (Tag::Cls, _) | (_, Tag::Cls) => EdgeClass::Cls,
                (x, y) if x == y => EdgeClass::Unimodal,
                _ => EdgeClass::CrossModal,
            }
        })
        .collect();
    Ok(EdgePartition { tokens: t, classes })
}

/// Per-layer masks `[heads, T, T]` for layers `1..=L`: the spec's edge set on
/// the selected layers, all-false elsewhere.
pub fn materialize_mask(spec: &EdgeMaskSpec, partition: &EdgePartition, heads: usize, tokens: usize, layers: usize) -> Result<Vec<Mask>> {
    spec.validate()?;
    if tokens != partition.tokens() || layers != spec.total_layers || heads == 0 {
        return Err(Error::usage(format!(
            "mask dims (heads {heads}, T {tokens}, L {layers}) do not match partition T {} and spec L {}",
            partition.tokens(),
            spec.total_layers
        )));
    }
    let selected = layers_for(spec);
    let on = partition.mask(&[spec.mask_type.edge_class()], heads);
    Ok((1..=layers)
        .map(|l| if selected.contains(&l) { on.clone() } else { Mask::none([heads, tokens, tokens]) })
        .collect())
}

/// `100 · (masked − baseline) / baseline`.
pub fn delta_percent(acc_masked: f64, acc_baseline: f64) -> Result<f64> {
    if !(acc_baseline > 0.0) || !acc_masked.is_finite() {
        return Err(Error::usage(format!(
            "Δ% undefined for baseline {acc_baseline} and masked accuracy {acc_masked}"
        )));
    }
    Ok(100.0 * (acc_masked - acc_baseline) / acc_baseline)
}

/// Applies an [`EdgeMaskSpec`] inside a model's attention layers.
#[derive(Clone, Copy, Debug)]
pub struct SpecHook(pub EdgeMaskSpec);

impl AttentionHook for SpecHook {
    fn edge_mask(&self, layer: usize, heads: usize, tags: &[Tag]) -> Result<Option<Mask>> {
        if !layers_for(&self.0).contains(&layer) {
            return Ok(None);
        }
        Ok(Some(classify_edges(tags)?.mask(&[self.0.mask_type.edge_class()], heads)))
    }
}

/// Masks arbitrary edge classes, CLS edges included, on a set of layers.
#[derive(Clone, Debug)]
pub struct EdgeSetHook {
    pub layers: BTreeSet<usize>,
    pub classes: Vec<EdgeClass>,
}

impl AttentionHook for EdgeSetHook {
    fn edge_mask(&self, layer: usize, heads: usize, tags: &[Tag]) -> Result<Option<Mask>> {
        if !self.layers.contains(&layer) {
            return Ok(None);
        }
        Ok(Some(classify_edges(tags)?.mask(&self.classes, heads)))
    }
}
