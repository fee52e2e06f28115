use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Emg,
    Acc,
    Force,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Emg, Modality::Acc, Modality::Force];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Emg => "emg",
            Modality::Acc => "acc",
            Modality::Force => "force",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emg" | "semg" => Ok(Modality::Emg),
            "acc" => Ok(Modality::Acc),
            "force" => Ok(Modality::Force),
            other => Err(Error::usage(format!("unknown modality `{other}`"))),
        }
    }
}

/// One trial of one modality: `samples[channel][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecording {
    pub modality: Modality,
    pub fs: f64,
    pub samples: Vec<Vec<f64>>,
    pub subject: u32,
    pub gesture: u32,
    pub repetition: u32,
}

impl SignalRecording {
    pub fn new(
        modality: Modality,
        fs: f64,
        samples: Vec<Vec<f64>>,
        subject: u32,
        gesture: u32,
        repetition: u32,
    ) -> Result<Self> {
        let rec = Self {
            modality,
            fs,
            samples,
            subject,
            gesture,
            repetition,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::usage(format!("sampling rate must be positive, got {}", self.fs)));
        }
        if self.repetition < 1 {
            return Err(Error::usage("repetition index starts at 1"));
        }
        if self.samples.is_empty() {
            return Err(Error::usage("recording has no channels"));
        }
        let n = self.samples[0].len();
        if let Some(c) = self.samples.iter().position(|row| row.len() != n) {
            return Err(Error::usage(format!(
                "channel {c} has {} samples, channel 0 has {n}",
                self.samples[c].len()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    /// Same labels, new samples and rate.
    pub(crate) fn with_samples(&self, fs: f64, samples: Vec<Vec<f64>>) -> Self {
        Self {
            modality: self.modality,
            fs,
            samples,
            subject: self.subject,
            gesture: self.gesture,
            repetition: self.repetition,
        }
    }
}
