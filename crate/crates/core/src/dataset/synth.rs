//! Synthetic gesture data with controllable cross-modal label dependence.
//!
//! Every stream has a set of co-activation templates. A template splits the
//! stream's electrodes into chords; each chord fires one band-limited burst in
//! its own time slot (four slots per trial), so every electrode is active
//! exactly once and the grouping carries the class.
//!
//! Classes in the cross-modal fraction come in pairs. Both classes of a pair
//! use the same compact template (at most two chords) in each stream, played
//! in the early or the late half of the trial. A trial draws a phase `a` for
//! the first stream and `a ⊕ bit` for the second, so each stream alone looks
//! the same for both classes and only cross-modal synchrony identifies the
//! class.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, StreamInfo, Trial};
use crate::error::{Error, Result};
use crate::signal::{Modality, SignalRecording};

/// Time slots per trial; also the largest number of chords in a template.
const SLOTS: usize = 4;
/// Chords in a paired-class template; they fit into half of the slots.
const COMPACT_CHORDS: usize = SLOTS / 2;
/// Fraction of a slot covered by a burst.
const BURST_FILL: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthStream {
    pub name: String,
    pub modality: Modality,
    /// Electrodes; the recording has `electrodes · axes` channels.
    pub electrodes: usize,
    pub fs: f64,
    /// 1, or 3 for tri-axial accelerometers.
    #[serde(default = "one")]
    pub axes: usize,
    /// Burst carrier band in Hz; defaults by modality.
    #[serde(default)]
    pub band: Option<(f64, f64)>,
}

fn one() -> usize {
    1
}

impl SynthStream {
    pub fn new(name: &str, modality: Modality, electrodes: usize, fs: f64) -> Self {
        Self {
            name: name.into(),
            modality,
            electrodes,
            fs,
            axes: 1,
            band: None,
        }
    }

    fn carrier_band(&self) -> (f64, f64) {
        self.band.unwrap_or(match self.modality {
            Modality::Emg => (20.0, 150.0),
            Modality::Acc | Modality::Force => (5.0, 60.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub streams: Vec<SynthStream>,
    pub subjects: u32,
    pub repetitions: u32,
    pub duration_s: f64,
    /// κ: fraction of classes identifiable only from both streams jointly.
    pub cross_modal_fraction: f64,
    pub snr_db: f64,
    /// Place chords in a random slot order per trial (within the phase half
    /// for paired classes), so that slot positions carry no label information.
    pub shuffle_slots: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            streams: vec![
                SynthStream::new("emg", Modality::Emg, 4, 1000.0),
                SynthStream::new("acc", Modality::Acc, 4, 1000.0),
            ],
            subjects: 3,
            repetitions: 6,
            duration_s: 0.5,
            cross_modal_fraction: 0.5,
            snr_db: 10.0,
            shuffle_slots: false,
            seed: 0,
        }
    }
}

/// Number of ways to split `n` items into at most `k` non-empty blocks.
fn partitions_up_to(n: usize, k: usize) -> u128 {
    // Stirling numbers of the second kind, row by row
    let mut s = vec![vec![0u128; k + 1]; n + 1];
    s[0][0] = 1;
    for i in 1..=n {
        for j in 1..=k.min(i) {
            s[i][j] = j as u128 * s[i - 1][j] + s[i - 1][j - 1];
        }
    }
    s[n].iter().sum()
}

impl SynthConfig {
    /// Number of classes that belong to cross-modal pairs.
    pub fn paired_classes(&self) -> usize {
        (self.cross_modal_fraction * self.classes as f64).round() as usize
    }

    /// Templates per stream: one per pair, one per unpaired class.
    pub fn templates_per_stream(&self) -> usize {
        let p = self.paired_classes();
        p / 2 + (self.classes - p)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: String| Err(Error::config(format!("synth.{f}"), r));
        if self.classes < 2 {
            return err("classes", format!("need at least 2 classes, got {}", self.classes));
        }
        let k = self.cross_modal_fraction;
        if !(0.0..=1.0).contains(&k) {
            return err("cross_modal_fraction", format!("{k} outside [0, 1]"));
        }
        let paired = k * self.classes as f64;
        if (paired - paired.round()).abs() > 1e-9 {
            return err(
                "cross_modal_fraction",
                format!("κ·classes = {paired} is not an integer"),
            );
        }
        if self.paired_classes() % 2 != 0 {
            return err(
                "cross_modal_fraction",
                format!("κ·classes = {} must be even, classes are paired", self.paired_classes()),
            );
        }
        if self.streams.is_empty() || self.streams.len() > 2 {
            return err("streams", format!("need one or two streams, got {}", self.streams.len()));
        }
        if self.paired_classes() > 0 && self.streams.len() != 2 {
            return err("streams", "cross-modal classes need exactly two streams".into());
        }
        if self.subjects == 0 {
            return err("subjects", "need at least one subject".into());
        }
        if self.repetitions == 0 {
            return err("repetitions", "need at least one repetition".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return err("duration_s", format!("must be positive, got {}", self.duration_s));
        }
        if !self.snr_db.is_finite() {
            return err("snr_db", "must be finite".into());
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.streams.iter().enumerate() {
            let f = |x: &str| format!("streams[{i}].{x}");
            if !names.insert(&s.name) {
                return Err(Error::config(f("name"), format!("duplicate stream `{}`", s.name)));
            }
            if s.electrodes == 0 {
                return Err(Error::config(f("electrodes"), "must be at least 1"));
            }
            if !(s.fs > 0.0 && s.fs.is_finite()) {
                return Err(Error::config(f("fs"), format!("must be positive, got {}", s.fs)));
            }
            match (s.axes, s.modality) {
                (1, _) | (3, Modality::Acc) => {}
                (a, m) => return Err(Error::config(f("axes"), format!("{a} axes not supported for {m}"))),
            }
            let (lo, hi) = s.carrier_band();
            if !(lo > 0.0 && lo < hi && hi < s.fs / 2.0) {
                return Err(Error::config(f("band"), format!("({lo}, {hi}) Hz invalid at fs {}", s.fs)));
            }
            let samples = (self.duration_s * s.fs).round() as usize;
            if samples / SLOTS < 8 {
                return Err(Error::config("synth.duration_s", format!("too short for {SLOTS} bursts in `{}`", s.name)));
            }
            let compact = partitions_up_to(s.electrodes, COMPACT_CHORDS);
            let pairs = self.paired_classes() / 2;
            let available = partitions_up_to(s.electrodes, SLOTS);
            if compact < pairs as u128 || available < self.templates_per_stream() as u128 {
                return Err(Error::config(
                    f("electrodes"),
                    format!(
                        "{} electrodes allow {available} templates ({compact} compact) for {} classes with {pairs} pairs",
                        s.electrodes, self.classes
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Analytic accuracy bound with one stream removed: unpaired classes stay
    /// identifiable and each pair collapses to a coin flip.
    pub fn pair_collapse_ceiling(&self) -> f64 {
        pair_collapse_ceiling(self.cross_modal_fraction)
    }
}

/// `1 − κ/2`.
pub fn pair_collapse_ceiling(kappa: f64) -> f64 {
    1.0 - kappa / 2.0
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Canonical chord labelling: chords numbered by first appearance.
fn canonical(assign: &[usize]) -> Vec<usize> {
    let mut map = Vec::<(usize, usize)>::new();
    assign
        .iter()
        .map(|&a| match map.iter().find(|(k, _)| *k == a) {
            Some(&(_, v)) => v,
            None => {
                let v = map.len();
                map.push((a, v));
                v
            }
        })
        .collect()
}

/// All canonical chord assignments of `n` electrodes with at most `k` chords,
/// as restricted growth strings.
fn enumerate_partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, max: usize, k: usize, cur: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            all.push(cur.clone());
            return;
        }
        for v in 0..=(max + 1).min(k - 1) {
            cur[i] = v;
            rec(i + 1, max.max(v), k, cur, all);
        }
    }
    let mut all = Vec::new();
    let mut cur = vec![0usize; n];
    rec(1, 0, k, &mut cur, &mut all);
    all
}

fn chords(template: &[usize]) -> usize {
    template.iter().max().map_or(0, |m| m + 1)
}

/// Distinct templates for each stream: the first `pairs` are compact and
/// belong to the pairs, the rest to unpaired classes in class order.
fn templates(cfg: &SynthConfig) -> Vec<Vec<Vec<usize>>> {
    let pairs = cfg.paired_classes() / 2;
    let total = cfg.templates_per_stream();
    cfg.streams
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[0x7e3, si as u64]));
            let n = s.electrodes;
            let mut out: Vec<Vec<usize>> = Vec::with_capacity(total);
            if partitions_up_to(n, SLOTS) <= 4096 {
                let mut all = enumerate_partitions(n, SLOTS);
                all.shuffle(&mut rng);
                let (compact, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|t| chords(t) <= COMPACT_CHORDS);
                let mut compact = compact.into_iter();
                out.extend(compact.by_ref().take(pairs));
                let mut rest: Vec<_> = compact.chain(rest).collect();
                rest.shuffle(&mut rng);
                out.extend(rest.into_iter().take(total - pairs));
            } else {
                let mut seen = BTreeSet::new();
                while out.len() < total {
                    let k = if out.len() < pairs { COMPACT_CHORDS } else { SLOTS };
                    let t = canonical(&(0..n).map(|_| rng.random_range(0..k)).collect::<Vec<_>>());
                    if seen.insert(t.clone()) {
                        out.push(t);
                    }
                }
            }
            out
        })
        .collect()
}

/// What one stream of a trial shows: which template, played in which half.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub template: usize,
    /// 0 (early half) or 1 (late half) for paired classes; 0 otherwise.
    pub phase: usize,
    pub paired: bool,
}

/// Per-stream latent state of one trial.
pub fn trial_latents(cfg: &SynthConfig, gesture: u32, subject: u32, repetition: u32) -> Vec<Latent> {
    let g = gesture as usize;
    let paired = cfg.paired_classes();
    if g < paired {
        let (pair, bit) = (g / 2, g % 2);
        // balanced over any two consecutive repetitions
        let a = (repetition as usize + subject as usize + pair) % 2;
        [a, a ^ bit]
            .into_iter()
            .map(|phase| Latent {
                template: pair,
                phase,
                paired: true,
            })
            .collect()
    } else {
        let latent = Latent {
            template: paired / 2 + (g - paired),
            phase: 0,
            paired: false,
        };
        vec![latent; cfg.streams.len()]
    }
}

fn burst(rng: &mut ChaCha8Rng, len: usize, fs: f64, band: (f64, f64)) -> Vec<f64> {
    let comps = rng.random_range(2..=4);
    let parts: Vec<(f64, f64)> = (0..comps)
        .map(|_| (rng.random_range(band.0..band.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let scale = 1.0 / (comps as f64).sqrt();
    (0..len)
        .map(|i| {
            let w = 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / len as f64).cos();
            let t = i as f64 / fs;
            w * scale * parts.iter().map(|(f, ph)| (2.0 * PI * f * t + ph).sin()).sum::<f64>()
        })
        .collect()
}

fn stream_signal(
    cfg: &SynthConfig,
    s: &SynthStream,
    template: &[usize],
    latent: Latent,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = (cfg.duration_s * s.fs).round() as usize;
    let slot_len = n / SLOTS;
    let burst_len = ((slot_len as f64 * BURST_FILL).round() as usize).max(4);
    let (first, span) = if latent.paired {
        (latent.phase * COMPACT_CHORDS, COMPACT_CHORDS)
    } else {
        (0, SLOTS)
    };
    let mut slot_of: Vec<usize> = (first..first + span).collect();
    if cfg.shuffle_slots {
        slot_of.shuffle(rng);
    }
    let onsets: Vec<usize> = (0..chords(template))
        .map(|c| slot_of[c] * slot_len + rng.random_range(0..=slot_len - burst_len))
        .collect();

    let band = s.carrier_band();
    let mut clean = vec![vec![0.0; n]; s.electrodes];
    for (e, &chord) in template.iter().enumerate() {
        let b = burst(rng, burst_len, s.fs, band);
        clean[e][onsets[chord]..onsets[chord] + burst_len].copy_from_slice(&b);
    }

    let mut out = Vec::with_capacity(s.electrodes * s.axes);
    for ch in &clean {
        let power = ch.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        let dir: Vec<f64> = if s.axes == 3 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            v.iter().map(|x| x / norm).collect()
        } else {
            vec![1.0]
        };
        for d in dir {
            out.push(ch.iter().map(|v| (d * v + noise.sample(rng)) as f32 as f64).collect());
        }
    }
    out
}

/// Deterministic in `cfg.seed`; each trial draws from its own random stream.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let templates = templates(cfg);
    let streams: Vec<StreamInfo> = cfg
        .streams
        .iter()
        .map(|s| StreamInfo {
            name: s.name.clone(),
            modality: s.modality,
            channels: s.electrodes * s.axes,
            fs: s.fs,
        })
        .collect();
    let mut trials = Vec::new();
    for subject in 1..=cfg.subjects {
        for gesture in 0..cfg.classes as u32 {
            for repetition in 1..=cfg.repetitions {
                let latents = trial_latents(cfg, gesture, subject, repetition);
                let mut recordings = Vec::with_capacity(cfg.streams.len());
                for (si, s) in cfg.streams.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
                        cfg.seed,
                        &[subject as u64, gesture as u64, repetition as u64, si as u64],
                    ));
                    let l = latents[si];
                    let samples = stream_signal(cfg, s, &templates[si][l.template], l, &mut rng);
                    recordings.push(SignalRecording::new(s.modality, s.fs, samples, subject, gesture, repetition)?);
                }
                trials.push(Trial {
                    subject,
                    gesture,
                    repetition,
                    recordings,
                });
            }
        }
    }
    let d = Dataset {
        streams,
        classes: cfg.classes,
        trials,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        assert_eq!(partitions_up_to(4, 4), 15);
        assert_eq!(partitions_up_to(2, 2), 2);
        assert_eq!(partitions_up_to(12, 4), 1 + 2047 + 86526 + 611501);
    }

    #[test]
    fn templates_are_distinct_and_canonical() {
        for electrodes in [3, 4, 6, 12] {
            let cfg = SynthConfig {
                classes: 5,
                cross_modal_fraction: 0.0,
                streams: vec![SynthStream::new("a", Modality::Emg, electrodes, 1000.0)],
                ..SynthConfig::default()
            };
            let t = &templates(&cfg)[0];
            assert_eq!(t.len(), 5);
            assert!(t.iter().all(|x| chords(x) <= SLOTS));
            let set: BTreeSet<_> = t.iter().collect();
            assert_eq!(set.len(), 5);
            for x in t {
                assert_eq!(&canonical(x), x);
            }
        }
        let cfg = SynthConfig {
            cross_modal_fraction: 1.0,
            ..SynthConfig::default()
        };
        for t in templates(&cfg) {
            assert_eq!(t.len(), 4);
            assert!(t.iter().all(|x| chords(x) <= COMPACT_CHORDS));
        }
    }

    #[test]
    fn paired_marginals_are_shared() {
        let cfg = SynthConfig::default();
        for pair in 0..cfg.paired_classes() / 2 {
            for stream in 0..2 {
                let seen = |g: u32| -> Vec<Latent> {
                    let mut v: Vec<_> = (1..=6).map(|r| trial_latents(&cfg, g, 1, r)[stream]).collect();
                    v.sort();
                    v
                };
                assert_eq!(seen(2 * pair as u32), seen(2 * pair as u32 + 1));
                assert_eq!(seen(2 * pair as u32).iter().filter(|l| l.phase == 1).count(), 3);
            }
        }
    }

    #[test]
    fn config_errors() {
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            assert!(c.validate().unwrap_err().is_config());
        };
        bad(|c| c.cross_modal_fraction = 0.3);
        bad(|c| c.cross_modal_fraction = 0.125);
        bad(|c| c.classes = 40);
        bad(|c| c.streams[0].fs = 200.0);
        bad(|c| c.streams.truncate(1));
        bad(|c| c.streams[0].axes = 3);
    }
}
