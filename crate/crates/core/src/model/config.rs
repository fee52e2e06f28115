use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mmmlp,
    Mmt,
    HierT,
    IsoNet,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mmmlp => "mmmlp",
            Family::Mmt => "mmt",
            Family::HierT => "hiert",
            Family::IsoNet => "isonet",
        }
    }
}

/// IsoNet token granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One token per channel over the whole analysis window.
    PerChannel,
    /// One token per (channel, tubelet), with positional encoding over tubelets.
    Windowed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    /// Width of the linear integration layer of the multimodal transformer.
    pub fusion_dim: usize,
    /// Depth of the second transformer stage of the hierarchical model.
    pub stage2_layers: usize,
    pub patch: usize,
    pub dropout: f64,
    pub isonet_tokens: TokenMode,
    pub anneal_horizon: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Test accuracy is recorded every this many epochs (and at the last).
    pub eval_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::IsoNet,
            embed_dim: 512,
            heads: 8,
            layers: 5,
            ffn_dim: 128,
            mlp_hidden: 200,
            fusion_dim: 128,
            stage2_layers: 2,
            patch: 40,
            dropout: 0.1,
            isonet_tokens: TokenMode::PerChannel,
            anneal_horizon: 750,
            epochs: 2000,
            lr: 4e-5,
            weight_decay: 0.01,
            batch_size: None,
            eval_every: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::config(format!("model.{f}"), r));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(
                "embed_dim",
                format!("{} is not divisible by {} heads", self.embed_dim, self.heads),
            );
        }
        if self.patch == 0 {
            return bad("patch", "must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.mlp_hidden == 0 || self.fusion_dim == 0 {
            return bad("ffn_dim", "layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if self.family == Family::IsoNet {
            if self.anneal_horizon == 0 {
                return bad("anneal_horizon", "must be positive".into());
            }
            if self.anneal_horizon > self.epochs {
                return bad(
                    "anneal_horizon",
                    format!("{} exceeds epochs {}", self.anneal_horizon, self.epochs),
                );
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == Some(0) {
            return bad("batch_size", "must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive".into());
        }
        Ok(())
    }
}

/// Shape of one model input stream after preprocessing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamShape {
    pub name: String,
    pub modality: Modality,
    pub channels: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub streams: Vec<StreamShape>,
    pub classes: usize,
}

impl InputSpec {
    pub fn total_channels(&self) -> usize {
        self.streams.iter().map(|s| s.channels).sum()
    }
}
