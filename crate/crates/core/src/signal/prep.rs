use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::filter::{apply_filter_zero_phase, design_butterworth, FilterSpec};
use crate::signal::{Modality, SignalRecording};

/// Standard deviations below this map the channel to zeros.
pub const ZSCORE_EPS: f64 = 1e-12;

/// Index of the first sample at or after time `t`.
fn sample_index(t: f64, fs: f64) -> usize {
    (t * fs - 1e-9).ceil().max(0.0) as usize
}

/// Per-channel `(x − mean) / std` with population std.
pub fn zscore(x: &SignalRecording) -> SignalRecording {
    let samples = x
        .samples
        .iter()
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std < ZSCORE_EPS {
                vec![0.0; ch.len()]
            } else {
                ch.iter().map(|v| (v - mean) / std).collect()
            }
        })
        .collect();
    x.with_samples(x.fs, samples)
}

pub fn zscore_rectify(x: &SignalRecording) -> SignalRecording {
    let mut z = zscore(x);
    for ch in &mut z.samples {
        for v in ch.iter_mut() {
            *v = v.abs();
        }
    }
    z
}

/// Keeps the first `⌊seconds · fs⌋` samples.
pub fn crop_transient(x: &SignalRecording, seconds: f64) -> Result<SignalRecording> {
    if !(seconds > 0.0) {
        return Err(Error::usage(format!("transient window must be positive, got {seconds} s")));
    }
    let n = (seconds * x.fs + 1e-9).floor() as usize;
    if n > x.len() {
        return Err(Error::usage(format!(
            "recording has {} samples, transient crop of {seconds} s needs {n}",
            x.len()
        )));
    }
    let samples = x.samples.iter().map(|ch| ch[..n].to_vec()).collect();
    Ok(x.with_samples(x.fs, samples))
}

/// Keeps the samples whose time stamps lie in `[start_s, end_s)`.
pub fn crop_steady_state(x: &SignalRecording, start_s: f64, end_s: f64) -> Result<SignalRecording> {
    if !(start_s >= 0.0 && start_s < end_s) {
        return Err(Error::usage(format!("invalid window [{start_s}, {end_s})")));
    }
    let (a, b) = (sample_index(start_s, x.fs), sample_index(end_s, x.fs));
    if b > x.len() {
        return Err(Error::usage(format!(
            "window end {end_s} s exceeds recording duration {} s",
            x.duration()
        )));
    }
    let samples = x.samples.iter().map(|ch| ch[a..b].to_vec()).collect();
    Ok(x.with_samples(x.fs, samples))
}

/// Linear interpolation onto the grid `k / target_fs` covering the original span.
pub fn resample_linear(x: &SignalRecording, target_fs: f64) -> Result<SignalRecording> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(Error::usage(format!("target rate must be positive, got {target_fs}")));
    }
    if target_fs == x.fs || x.is_empty() {
        return Ok(x.with_samples(target_fs, x.samples.clone()));
    }
    let n = x.len();
    let ratio = x.fs / target_fs;
    let n_out = (((n - 1) as f64) / ratio + 1e-9).floor() as usize + 1;
    let samples = x
        .samples
        .iter()
        .map(|ch| {
            (0..n_out)
                .map(|k| {
                    let p = k as f64 * ratio;
                    let i = p.floor() as usize;
                    if i + 1 >= n {
                        ch[n - 1]
                    } else {
                        let frac = p - i as f64;
                        ch[i] + (ch[i + 1] - ch[i]) * frac
                    }
                })
                .collect()
        })
        .collect();
    Ok(x.with_samples(target_fs, samples))
}

/// `√(x² + y² + z²)` per consecutive axis triple.
pub fn acc_magnitude(x: &SignalRecording) -> Result<SignalRecording> {
    if x.channels() % 3 != 0 {
        return Err(Error::usage(format!(
            "accelerometer channel count {} is not a multiple of 3",
            x.channels()
        )));
    }
    let samples = x
        .samples
        .chunks_exact(3)
        .map(|axes| {
            (0..x.len())
                .map(|t| (axes[0][t].powi(2) + axes[1][t].powi(2) + axes[2][t].powi(2)).sqrt())
                .collect()
        })
        .collect();
    Ok(x.with_samples(x.fs, samples))
}

/// Non-overlapping `[patch][channel][sample]` windows; the remainder is dropped.
pub fn segment_tubelets(x: &SignalRecording, patch: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if patch == 0 {
        return Err(Error::usage("patch length must be at least 1"));
    }
    if x.len() < patch {
        return Err(Error::usage(format!(
            "recording of {} samples is shorter than one patch of {patch}",
            x.len()
        )));
    }
    Ok((0..x.len() / patch)
        .map(|p| x.samples.iter().map(|ch| ch[p * patch..(p + 1) * patch].to_vec()).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case", deny_unknown_fields)]
pub enum CropWindow {
    Transient { seconds: f64 },
    SteadyState { start_s: f64, end_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub order: usize,
    pub emg_band: (f64, f64),
    pub lowpass_hz: f64,
    /// Collapse accelerometer axis triples to magnitudes.
    pub acc_magnitude: bool,
    /// Common rate after resampling; `None` keeps each modality's own rate.
    pub target_fs: Option<f64>,
    pub window: CropWindow,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            order: 4,
            emg_band: (10.0, 500.0),
            lowpass_hz: 90.0,
            acc_magnitude: false,
            target_fs: None,
            window: CropWindow::Transient { seconds: 0.5 },
        }
    }
}

impl PrepConfig {
    pub fn filter_for(&self, modality: Modality, fs: f64) -> FilterSpec {
        match modality {
            Modality::Emg => FilterSpec::band_pass(self.order, self.emg_band.0, self.emg_band.1, fs),
            Modality::Acc | Modality::Force => FilterSpec::low_pass(self.order, self.lowpass_hz, fs),
        }
    }
}

/// filter → magnitude (ACC) → resample → z-score + rectify → crop.
pub fn preprocess(x: &SignalRecording, cfg: &PrepConfig) -> Result<SignalRecording> {
    x.validate()?;
    let filter = design_butterworth(&cfg.filter_for(x.modality, x.fs))?;
    let mut y = apply_filter_zero_phase(x, &filter)?;
    if x.modality == Modality::Acc && cfg.acc_magnitude {
        y = acc_magnitude(&y)?;
    }
    if let Some(fs) = cfg.target_fs {
        y = resample_linear(&y, fs)?;
    }
    let y = zscore_rectify(&y);
    match cfg.window {
        CropWindow::Transient { seconds } => crop_transient(&y, seconds),
        CropWindow::SteadyState { start_s, end_s } => crop_steady_state(&y, start_s, end_s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(fs: f64, samples: Vec<Vec<f64>>) -> SignalRecording {
        SignalRecording::new(Modality::Emg, fs, samples, 1, 0, 1).unwrap()
    }

    #[test]
    fn zscore_examples() {
        let r = zscore_rectify(&rec(1.0, vec![vec![1.0, 1.0, 1.0]]));
        assert_eq!(r.samples[0], vec![0.0, 0.0, 0.0]);
        let r = zscore_rectify(&rec(1.0, vec![vec![-1.0, 1.0]]));
        assert_eq!(r.samples[0], vec![1.0, 1.0]);
    }

    #[test]
    fn zscore_moments() {
        let ch: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin() * 3.0 + 7.0).collect();
        let z = zscore(&rec(100.0, vec![ch]));
        let n = z.len() as f64;
        let mean = z.samples[0].iter().sum::<f64>() / n;
        let std = (z.samples[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transient_crop() {
        let r = rec(2000.0, vec![vec![0.0; 4000]]);
        assert_eq!(crop_transient(&r, 0.5).unwrap().len(), 1000);
        let r = rec(200.0, vec![vec![0.0; 400]]);
        assert_eq!(crop_transient(&r, 0.5).unwrap().len(), 100);
        assert_eq!(crop_transient(&r, 2.0).unwrap(), r);
        assert!(crop_transient(&r, 2.5).is_err());
    }

    #[test]
    fn steady_crop() {
        let r = rec(2000.0, vec![(0..5000).map(f64::from).collect()]);
        let c = crop_steady_state(&r, 1.0, 2.0).unwrap();
        assert_eq!(c.len(), 2000);
        assert_eq!(c.samples[0][0], 2000.0);
        assert_eq!(crop_steady_state(&r, 0.0, r.duration()).unwrap(), r);
        let r = rec(200.0, vec![vec![0.0; 500]]);
        assert_eq!(crop_steady_state(&r, 1.0, 2.0).unwrap().len(), 200);
        assert!(crop_steady_state(&r, 2.0, 3.0).is_err());
        assert!(crop_steady_state(&r, 1.0, 1.0).is_err());
    }

    #[test]
    fn resample_examples() {
        let r = rec(1.0, vec![vec![0.0, 1.0, 2.0]]);
        assert_eq!(resample_linear(&r, 2.0).unwrap().samples[0], vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(resample_linear(&r, 1.0).unwrap(), r);
        let c = rec(148.0, vec![vec![4.2; 148]]);
        let up = resample_linear(&c, 2000.0).unwrap();
        assert!(up.samples[0].iter().all(|&v| v == 4.2));
        assert_eq!(up.fs, 2000.0);
    }

    #[test]
    fn magnitude_examples() {
        let mut r = rec(1.0, vec![vec![3.0, 0.0, 1.0], vec![4.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]);
        r.modality = Modality::Acc;
        let m = acc_magnitude(&r).unwrap();
        assert_eq!(m.channels(), 1);
        assert_eq!(m.samples[0][0], 5.0);
        assert_eq!(m.samples[0][1], 0.0);
        assert!((m.samples[0][2] - 3f64.sqrt()).abs() < 1e-15);
        r.samples.pop();
        assert!(acc_magnitude(&r).is_err());
    }

    #[test]
    fn tubelet_counts() {
        for (len, n) in [(1000, 25), (40, 1), (99, 2)] {
            let r = rec(1.0, vec![(0..len).map(f64::from).collect(); 2]);
            let p = segment_tubelets(&r, 40).unwrap();
            assert_eq!(p.len(), n);
            let flat: Vec<f64> = p.iter().flat_map(|w| w[1].clone()).collect();
            assert_eq!(flat, r.samples[1][..n * 40].to_vec());
        }
        let r = rec(1.0, vec![vec![0.0; 39]]);
        assert!(segment_tubelets(&r, 40).is_err());
        assert!(segment_tubelets(&r, 0).is_err());
    }
}
