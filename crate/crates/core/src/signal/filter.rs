//! Butterworth design (analog prototype, prewarped bilinear transform) and
//! forward-backward biquad filtering.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SignalRecording;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    LowPass { cutoff: f64 },
    BandPass { low: f64, high: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    #[serde(flatten)]
    pub kind: FilterKind,
    pub fs: f64,
}

impl FilterSpec {
    pub fn low_pass(order: usize, cutoff: f64, fs: f64) -> Self {
        Self {
            order,
            kind: FilterKind::LowPass { cutoff },
            fs,
        }
    }

    pub fn band_pass(order: usize, low: f64, high: f64, fs: f64) -> Self {
        Self {
            order,
            kind: FilterKind::BandPass { low, high },
            fs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Design("order must be at least 1".into()));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Design(format!("sampling rate must be positive, got {}", self.fs)));
        }
        let nyq = self.fs / 2.0;
        let check = |f: f64| {
            if !(f > 0.0 && f < nyq) {
                Err(Error::Design(format!(
                    "cutoff {f} Hz must lie strictly between 0 and the Nyquist frequency {nyq} Hz"
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            FilterKind::LowPass { cutoff } => check(cutoff),
            FilterKind::BandPass { low, high } => {
                check(low)?;
                check(high)?;
                if low >= high {
                    return Err(Error::Design(format!("band-pass low edge {low} Hz must be below high edge {high} Hz")));
                }
                Ok(())
            }
        }
    }
}

/// `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    /// Stability triangle for a second-order denominator.
    pub fn is_stable(&self) -> bool {
        let [a1, a2] = self.a;
        a2.abs() < 1.0 && a1.abs() < 1.0 + a2
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl BiquadCascade {
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |h, s| h * s.response(z_inv))
    }

    pub fn magnitude_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Equivalent direct-form order, two per section.
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    /// Reflection length used on each edge by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.order()
    }

    /// Single forward pass with the given per-section initial states.
    fn run(&self, x: &mut [f64], init: &[[f64; 2]]) {
        for v in x.iter_mut() {
            *v *= self.gain;
        }
        for (s, st) in self.sections.iter().zip(init) {
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            let (mut s1, mut s2) = (st[0], st[1]);
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + s1;
                s1 = b1 * xin - a1 * y + s2;
                s2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Section states that make the cascade output steady for a constant input `u`.
    fn steady_state(&self, u: f64) -> Vec<[f64; 2]> {
        let mut level = u * self.gain;
        self.sections
            .iter()
            .map(|s| {
                let y = s.dc_gain() * level;
                let st = [y - s.b[0] * level, s.b[2] * level - s.a[1] * y];
                level = y;
                st
            })
            .collect()
    }
}

fn bilinear(s: Complex64, fs2: f64) -> Complex64 {
    (fs2 + s) / (fs2 - s)
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Normalized Butterworth prototype poles in the left half plane.
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect()
}

/// Groups digital poles into conjugate pairs (or pairs of reals) and builds
/// denominators. Returns `(a1, a2)` per section and any single leftover real pole.
fn pair_poles(poles: &[Complex64]) -> (Vec<[f64; 2]>, Option<f64>) {
    let tol = 1e-10;
    let mut dens = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in poles {
        if p.im > tol {
            dens.push([-2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= tol {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut it = reals.chunks_exact(2);
    for pair in &mut it {
        dens.push([-(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    (dens, it.remainder().first().copied())
}

pub fn design_butterworth(spec: &FilterSpec) -> Result<BiquadCascade> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.fs;
    let proto = prototype_poles(n);

    let (poles, numerator, reference_freq): (Vec<Complex64>, [f64; 3], f64) = match spec.kind {
        FilterKind::LowPass { cutoff } => {
            let wc = prewarp(cutoff, spec.fs);
            let poles = proto.iter().map(|&p| bilinear(p * wc, fs2)).collect();
            (poles, [1.0, 2.0, 1.0], 0.0)
        }
        FilterKind::BandPass { low, high } => {
            let (w1, w2) = (prewarp(low, spec.fs), prewarp(high, spec.fs));
            let bw = w2 - w1;
            let w0sq = w1 * w2;
            let mut poles = Vec::with_capacity(2 * n);
            for &p in &proto {
                let pb = p * bw;
                let disc = (pb * pb - 4.0 * w0sq).sqrt();
                poles.push(bilinear((pb + disc) / 2.0, fs2));
                poles.push(bilinear((pb - disc) / 2.0, fs2));
            }
            let center = spec.fs / PI * (w0sq.sqrt() / fs2).atan();
            (poles, [1.0, 0.0, -1.0], center)
        }
    };

    let (dens, leftover) = pair_poles(&poles);
    let mut sections: Vec<Biquad> = dens.into_iter().map(|a| Biquad { b: numerator, a }).collect();
    if let Some(p) = leftover {
        // Only odd low-pass orders leave one real pole: (1 + z⁻¹) / (1 − p z⁻¹).
        sections.push(Biquad {
            b: [1.0, 1.0, 0.0],
            a: [-p, 0.0],
        });
    }
    let mut cascade = BiquadCascade { sections, gain: 1.0 };
    let g = cascade.response(reference_freq, spec.fs).norm();
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::Design(format!("degenerate design, reference gain {g}")));
    }
    cascade.gain = 1.0 / g;
    if !cascade.is_stable() {
        return Err(Error::Design("designed cascade is unstable".into()));
    }
    Ok(cascade)
}

/// Zero-phase forward-backward filtering of one channel with odd reflection
/// padding and steady-state initial conditions.
pub fn filtfilt(f: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>> {
    let pad = f.pad_len();
    if x.len() <= pad {
        return Err(Error::usage(format!(
            "signal of {} samples is too short for zero-phase filtering (needs more than {pad})",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = f.steady_state(ext[0]);
    f.run(&mut ext, &zi);
    ext.reverse();
    let zi = f.steady_state(ext[0]);
    f.run(&mut ext, &zi);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

pub fn apply_filter_zero_phase(x: &SignalRecording, f: &BiquadCascade) -> Result<SignalRecording> {
    if !f.is_stable() {
        return Err(Error::usage("cannot apply an unstable filter"));
    }
    let samples = x
        .samples
        .iter()
        .map(|ch| filtfilt(f, ch))
        .collect::<Result<Vec<_>>>()?;
    Ok(x.with_samples(x.fs, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALF_POWER_DB: f64 = -3.0103;

    #[test]
    fn low_pass_dc_and_cutoff() {
        let f = design_butterworth(&FilterSpec::low_pass(4, 90.0, 2000.0)).unwrap();
        assert_eq!(f.sections.len(), 2);
        assert!((f.response(0.0, 2000.0).norm() - 1.0).abs() < 1e-12);
        assert!((f.magnitude_db(90.0, 2000.0) - HALF_POWER_DB).abs() < 0.05);
    }

    #[test]
    fn odd_low_pass_has_first_order_section() {
        let f = design_butterworth(&FilterSpec::low_pass(3, 50.0, 1000.0)).unwrap();
        assert_eq!(f.sections.len(), 2);
        assert!((f.magnitude_db(50.0, 1000.0) - HALF_POWER_DB).abs() < 1e-6);
    }

    #[test]
    fn band_pass_edges_and_stop_band() {
        let f = design_butterworth(&FilterSpec::band_pass(4, 10.0, 500.0, 2000.0)).unwrap();
        assert_eq!(f.sections.len(), 4);
        assert!(f.response(0.0, 2000.0).norm() < 1e-12);
        assert!(f.response(1000.0, 2000.0).norm() < 1e-12);
        assert!((f.magnitude_db(10.0, 2000.0) - HALF_POWER_DB).abs() < 0.05);
        assert!((f.magnitude_db(500.0, 2000.0) - HALF_POWER_DB).abs() < 0.05);
        // squared response after forward-backward filtering
        assert!(2.0 * f.magnitude_db(800.0, 2000.0) < -40.0);
    }

    #[test]
    fn cutoff_at_or_above_nyquist_is_rejected() {
        assert!(matches!(
            design_butterworth(&FilterSpec::low_pass(4, 1000.0, 2000.0)),
            Err(Error::Design(_))
        ));
        assert!(design_butterworth(&FilterSpec::band_pass(4, 10.0, 1200.0, 2000.0)).is_err());
        assert!(design_butterworth(&FilterSpec::band_pass(4, 300.0, 100.0, 2000.0)).is_err());
    }

    #[test]
    fn zero_and_constant_signals() {
        let lp = design_butterworth(&FilterSpec::low_pass(4, 90.0, 2000.0)).unwrap();
        assert!(filtfilt(&lp, &[0.0; 200]).unwrap().iter().all(|&v| v == 0.0));
        let y = filtfilt(&lp, &[2.5; 200]).unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-9), "{:?}", &y[..4]);
    }

    #[test]
    fn short_signal_is_rejected() {
        let lp = design_butterworth(&FilterSpec::low_pass(4, 90.0, 2000.0)).unwrap();
        assert_eq!(lp.pad_len(), 12);
        assert!(filtfilt(&lp, &[1.0; 12]).is_err());
        assert!(filtfilt(&lp, &[1.0; 13]).is_ok());
    }
}
