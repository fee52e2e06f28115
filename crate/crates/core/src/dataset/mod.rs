//! Multimodal trial collections, the synthetic generator, the on-disk format,
//! repetition splits and channel partitions.

mod io;
mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{preprocess, Modality, PrepConfig, SignalRecording};

pub use io::{read_dataset, write_dataset, MAGIC, MANIFEST_FILE};
pub use synth::{pair_collapse_ceiling, synth_generate, trial_latents, Latent, SynthConfig, SynthStream};

/// One input stream of a dataset, e.g. `emg` or a channel group of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamInfo {
    pub name: String,
    pub modality: Modality,
    pub channels: usize,
    pub fs: f64,
}

/// One (subject, gesture, repetition) with a recording per stream, in stream order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub subject: u32,
    pub gesture: u32,
    pub repetition: u32,
    pub recordings: Vec<SignalRecording>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub streams: Vec<StreamInfo>,
    pub classes: usize,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::usage("dataset declares no streams"));
        }
        let mut names = BTreeSet::new();
        for s in &self.streams {
            if !names.insert(s.name.as_str()) {
                return Err(Error::usage(format!("duplicate stream name `{}`", s.name)));
            }
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::usage(format!("stream name `{}` must be [A-Za-z0-9_-]+", s.name)));
            }
        }
        for t in &self.trials {
            if t.gesture as usize >= self.classes {
                return Err(Error::usage(format!(
                    "trial s{} r{} has label {} outside [0, {})",
                    t.subject, t.repetition, t.gesture, self.classes
                )));
            }
            if t.recordings.len() != self.streams.len() {
                return Err(Error::usage(format!(
                    "trial s{} g{} r{} has {} recordings for {} streams",
                    t.subject,
                    t.gesture,
                    t.repetition,
                    t.recordings.len(),
                    self.streams.len()
                )));
            }
            for (r, s) in t.recordings.iter().zip(&self.streams) {
                r.validate()?;
                if r.channels() != s.channels || r.modality != s.modality || r.fs != s.fs {
                    return Err(Error::usage(format!(
                        "trial s{} g{} r{} stream `{}` does not match the declared layout",
                        t.subject, t.gesture, t.repetition, s.name
                    )));
                }
                if (r.subject, r.gesture, r.repetition) != (t.subject, t.gesture, t.repetition) {
                    return Err(Error::usage("recording labels disagree with their trial"));
                }
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.trials.iter().map(|t| t.subject).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn repetitions(&self) -> BTreeSet<u32> {
        self.trials.iter().map(|t| t.repetition).collect()
    }

    pub fn stream_index(&self, name: &str) -> Result<usize> {
        self.streams
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::usage(format!("unknown stream `{name}`")))
    }

    /// Runs the preprocessing pipeline on every recording.
    pub fn preprocess(&self, cfg: &PrepConfig) -> Result<Dataset> {
        let trials = self
            .trials
            .iter()
            .map(|t| {
                let recordings = t.recordings.iter().map(|r| preprocess(r, cfg)).collect::<Result<Vec<_>>>()?;
                Ok(Trial {
                    recordings,
                    ..t.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let streams = match trials.first() {
            Some(t) => self
                .streams
                .iter()
                .zip(&t.recordings)
                .map(|(s, r)| StreamInfo {
                    channels: r.channels(),
                    fs: r.fs,
                    ..s.clone()
                })
                .collect(),
            None => self.streams.clone(),
        };
        let out = Dataset {
            streams,
            classes: self.classes,
            trials,
        };
        out.validate()?;
        Ok(out)
    }

    /// Builds a dataset whose streams are channel subsets of existing streams.
    /// Each entry is `(new name, source stream, source channels)`.
    pub fn regroup(&self, groups: &[(String, String, Vec<usize>)]) -> Result<Dataset> {
        let mut picks = Vec::with_capacity(groups.len());
        let mut streams = Vec::with_capacity(groups.len());
        for (name, src, chans) in groups {
            let si = self.stream_index(src)?;
            let info = &self.streams[si];
            if chans.is_empty() {
                return Err(Error::usage(format!("channel group `{name}` is empty")));
            }
            if let Some(&c) = chans.iter().find(|&&c| c >= info.channels) {
                return Err(Error::usage(format!(
                    "channel {c} out of range for stream `{src}` with {} channels",
                    info.channels
                )));
            }
            picks.push((si, chans.clone()));
            streams.push(StreamInfo {
                name: name.clone(),
                modality: info.modality,
                channels: chans.len(),
                fs: info.fs,
            });
        }
        let trials = self
            .trials
            .iter()
            .map(|t| Trial {
                recordings: picks
                    .iter()
                    .map(|(si, chans)| {
                        let r = &t.recordings[*si];
                        let mut out = r.clone();
                        out.samples = chans.iter().map(|&c| r.samples[c].clone()).collect();
                        out
                    })
                    .collect(),
                ..t.clone()
            })
            .collect();
        let out = Dataset {
            streams,
            classes: self.classes,
            trials,
        };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl SplitSpec {
    pub fn new(train: impl IntoIterator<Item = u32>, test: impl IntoIterator<Item = u32>) -> Self {
        Self {
            train: train.into_iter().collect(),
            test: test.into_iter().collect(),
        }
    }

    /// Train on repetitions 1, 3, 4, 6 and test on 2, 5.
    pub fn six_repetitions() -> Self {
        Self::new([1, 3, 4, 6], [2, 5])
    }

    /// Train on repetitions 1, 3, 4 and test on 2, 5.
    pub fn five_repetitions() -> Self {
        Self::new([1, 3, 4], [2, 5])
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::config("split", "train and test repetition sets must be non-empty"));
        }
        if let Some(r) = self.train.intersection(&self.test).next() {
            return Err(Error::config("split", format!("repetition {r} is in both train and test")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::six_repetitions()
    }
}

/// Partitions trials by repetition; repetitions in neither set are dropped.
pub fn split_by_repetition(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset)> {
    s.validate()?;
    let present = d.repetitions();
    if let Some(r) = s.train.iter().chain(&s.test).find(|r| !present.contains(r)) {
        return Err(Error::usage(format!("repetition {r} does not occur in the dataset")));
    }
    let pick = |set: &BTreeSet<u32>| Dataset {
        streams: d.streams.clone(),
        classes: d.classes,
        trials: d.trials.iter().filter(|t| set.contains(&t.repetition)).cloned().collect(),
    };
    Ok((pick(&s.train), pick(&s.test)))
}

/// Two disjoint random channel groups of `group_size` drawn from `stream`.
pub fn channel_partition<R: Rng + ?Sized>(
    d: &Dataset,
    stream: &str,
    group_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let info = &d.streams[d.stream_index(stream)?];
    if group_size == 0 || 2 * group_size > info.channels {
        return Err(Error::usage(format!(
            "cannot draw two groups of {group_size} from {} channels",
            info.channels
        )));
    }
    let mut idx: Vec<usize> = (0..info.channels).collect();
    idx.shuffle(rng);
    let mut a = idx[..group_size].to_vec();
    let mut b = idx[group_size..2 * group_size].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(reps: u32, channels: usize) -> Dataset {
        let streams = vec![StreamInfo {
            name: "emg".into(),
            modality: Modality::Emg,
            channels,
            fs: 100.0,
        }];
        let mut trials = Vec::new();
        for g in 0..2 {
            for r in 1..=reps {
                let samples = (0..channels).map(|c| vec![c as f64; 4]).collect();
                trials.push(Trial {
                    subject: 1,
                    gesture: g,
                    repetition: r,
                    recordings: vec![SignalRecording::new(Modality::Emg, 100.0, samples, 1, g, r).unwrap()],
                });
            }
        }
        Dataset {
            streams,
            classes: 2,
            trials,
        }
    }

    #[test]
    fn six_repetition_split_ratio() {
        let d = toy(6, 2);
        let (tr, te) = split_by_repetition(&d, &SplitSpec::six_repetitions()).unwrap();
        assert_eq!(tr.trials.len(), 8);
        assert_eq!(te.trials.len(), 4);
        assert!(tr.trials.iter().all(|t| [1, 3, 4, 6].contains(&t.repetition)));
    }

    #[test]
    fn five_repetition_split() {
        let d = toy(5, 2);
        let (tr, te) = split_by_repetition(&d, &SplitSpec::five_repetitions()).unwrap();
        assert_eq!((tr.trials.len(), te.trials.len()), (6, 4));
    }

    #[test]
    fn leftover_repetitions_are_excluded() {
        let d = toy(6, 2);
        let (tr, te) = split_by_repetition(&d, &SplitSpec::new([1], [2])).unwrap();
        assert_eq!(tr.trials.len() + te.trials.len(), 4);
    }

    #[test]
    fn bad_splits_are_rejected() {
        let d = toy(3, 2);
        assert!(split_by_repetition(&d, &SplitSpec::new([1, 2], [2])).is_err());
        assert!(split_by_repetition(&d, &SplitSpec::new([1], [7])).is_err());
        assert!(split_by_repetition(&d, &SplitSpec::new([], [1])).is_err());
    }

    #[test]
    fn partition_examples() {
        let d = toy(1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = channel_partition(&d, "emg", 6, &mut rng).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());

        let d2 = toy(1, 2);
        let (a, b) = channel_partition(&d2, "emg", 1, &mut rng).unwrap();
        let mut pair = [a[0], b[0]];
        pair.sort_unstable();
        assert_eq!(pair, [0, 1]);

        let again = channel_partition(&d, "emg", 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let first = channel_partition(&d, "emg", 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(again, first);
        assert!(channel_partition(&d2, "emg", 2, &mut rng).is_err());
    }

    #[test]
    fn regroup_builds_channel_streams() {
        let d = toy(1, 4);
        let g = d
            .regroup(&[
                ("emg_a".into(), "emg".into(), vec![0, 2]),
                ("emg_b".into(), "emg".into(), vec![1, 3]),
            ])
            .unwrap();
        assert_eq!(g.streams.len(), 2);
        assert_eq!(g.trials[0].recordings[1].samples[1][0], 3.0);
        assert!(d.regroup(&[("x".into(), "emg".into(), vec![9])]).is_err());
    }
}
