//! Experiment configuration, read from TOML. Unknown keys are rejected at
//! every level.
//!
//! ```toml
//! name = "desk"
//! seeds = [0, 1, 2]
//! out = "results"
//!
//! [data]
//! synth = { subjects = 6, cross_modal_fraction = 0.5 }
//!
//! [prep]
//! target_fs = 100.0
//!
//! [model]
//! family = "isonet"
//! embed_dim = 32
//!
//! [ablation]
//! enabled = true
//! factor = 10
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use biofuse::dataset::{SplitSpec, SynthConfig};
use biofuse::masking::{MaskMode, MaskType};
use biofuse::model::ModelConfig;
use biofuse::signal::PrepConfig;
use biofuse::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory, relative to the config file.
    pub path: Option<PathBuf>,
    /// Generate data instead of reading it. The generator seed is offset by
    /// the run seed, so every seed sees its own draw.
    pub synth: Option<SynthConfig>,
    /// The dataset at `path` has already been through `prep`.
    #[serde(default)]
    pub preprocessed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Streams to zero, one evaluation condition each. Empty means every stream.
    pub zero: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { zero: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Run the masking grid as part of `run`.
    pub enabled: bool,
    /// Bonferroni factor; the number of cells when unset.
    pub factor: Option<usize>,
    pub modes: Vec<MaskMode>,
    pub types: Vec<MaskType>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            factor: None,
            modes: MaskMode::ALL.to_vec(),
            types: MaskType::ALL.to_vec(),
        }
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub prep: PrepConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

/// Command-line overrides, applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub factor: Option<usize>,
}

impl ExperimentConfig {
    /// Minimal synthetic experiment, handy for tests and as a template.
    pub fn synthetic(name: &str, synth: SynthConfig, model: ModelConfig) -> Self {
        Self {
            name: name.into(),
            seeds: default_seeds(),
            out: default_out(),
            threads: 1,
            data: DataConfig {
                path: None,
                synth: Some(synth),
                preprocessed: false,
            },
            prep: PrepConfig::default(),
            split: SplitSpec::default(),
            model,
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Parses TOML text. Relative data paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s.len() < 60)
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().trim().to_string())
        })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(f) = o.factor {
            self.ablation.factor = Some(f);
        }
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || self.name.starts_with('.') {
            return Err(Error::config("name", format!("`{}` must be a plain file name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return Err(Error::config("data", "set either `path` or `synth`, not both")),
            (None, None) => return Err(Error::config("data.path", "no dataset: set `data.path` or `data.synth`")),
            (Some(p), None) => {
                if !p.is_dir() {
                    return Err(Error::config("data.path", format!("{} is not a directory", p.display())));
                }
            }
            (None, Some(s)) => {
                s.validate()?;
                if self.data.preprocessed {
                    return Err(Error::config("data.preprocessed", "generated data is always raw"));
                }
            }
        }
        self.split.validate()?;
        self.model.validate()?;
        if self.ablation.factor == Some(0) {
            return Err(Error::config("ablation.factor", "must be at least 1"));
        }
        if self.ablation.modes.is_empty() || self.ablation.types.is_empty() {
            return Err(Error::config("ablation", "modes and types must be non-empty"));
        }
        Ok(())
    }

    /// Streams zeroed by the evaluation conditions, checked against the data.
    pub fn zero_streams(&self, available: &[String]) -> Result<Vec<String>> {
        if self.eval.zero.is_empty() {
            return Ok(available.to_vec());
        }
        for z in &self.eval.zero {
            if !available.contains(z) {
                return Err(Error::config(
                    "eval.zero",
                    format!("stream `{z}` is not in the dataset (streams: {})", available.join(", ")),
                ));
            }
        }
        Ok(self.eval.zero.clone())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("seed-{seed}"))
    }
}
