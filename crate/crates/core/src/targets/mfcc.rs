use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::audio::{StftPlan, Waveform, Window};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub frame: usize,
    pub hop: usize,
    pub fft: usize,
    pub sample_rate: u32,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            n_coeffs: 13,
            frame: 400,
            hop: 320,
            fft: 512,
            sample_rate: 16000,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters `[n_mels][fft/2 + 1]` spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_mels: usize, fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins = fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II of `x`, first `n_out` coefficients.
pub fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            let w = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * w
        })
        .collect()
}

const LOG_FLOOR: f64 = 1e-10;

/// MFCCs before per-utterance normalisation. Frames are centred on
/// multiples of the hop, so there are `ceil(len / hop)` of them.
pub fn mfcc_unnormalized(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "mfcc expects {} Hz input, got {} Hz",
            cfg.sample_rate, w.sample_rate
        )));
    }
    if w.len() < cfg.frame {
        return Err(Error::invalid(format!(
            "utterance of {} samples is shorter than one {}-sample frame",
            w.len(),
            cfg.frame
        )));
    }
    if cfg.n_coeffs > cfg.n_mels || cfg.fft < cfg.frame {
        return Err(Error::Config(format!("inconsistent mfcc settings {cfg:?}")));
    }
    let plan = StftPlan::new(cfg.fft)?;
    let win = Window::Hann.coefficients(cfg.frame);
    let fb = mel_filterbank(cfg.n_mels, cfg.fft, cfg.sample_rate);
    let x = w.samples();
    let frames = x.len().div_ceil(cfg.hop);
    let pad = cfg.frame / 2;
    let mut data = Vec::with_capacity(frames * cfg.n_coeffs);
    let mut buf = vec![0.0; cfg.frame];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            let p = (t * cfg.hop + i) as isize - pad as isize;
            *b = if p >= 0 && (p as usize) < x.len() {
                x[p as usize] * win[i]
            } else {
                0.0
            };
        }
        let power: Vec<f64> = plan.rfft(&buf).iter().map(|c| c.norm_sqr()).collect();
        let logmel: Vec<f64> = fb
            .iter()
            .map(|f| (f.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>() + LOG_FLOOR).ln())
            .collect();
        data.extend(dct_ii(&logmel, cfg.n_coeffs));
    }
    FeatureSequence::new(frames, cfg.n_coeffs, data, cfg.sample_rate as f64 / cfg.hop as f64)
}

/// Per-utterance mean/variance-normalised MFCCs.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    let mut f = mfcc_unnormalized(w, cfg)?;
    f.normalize();
    Ok(f)
}
