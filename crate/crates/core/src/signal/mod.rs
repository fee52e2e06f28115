//! Deterministic preprocessing of raw multichannel recordings.

mod filter;
mod prep;
mod recording;

pub use filter::{
    apply_filter_zero_phase, design_butterworth, filtfilt, Biquad, BiquadCascade, FilterKind, FilterSpec,
};
pub use prep::{
    acc_magnitude, crop_steady_state, crop_transient, preprocess, resample_linear, segment_tubelets, zscore,
    zscore_rectify, CropWindow, PrepConfig, ZSCORE_EPS,
};
pub use recording::{Modality, SignalRecording};
