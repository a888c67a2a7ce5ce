//! Short-time Fourier transform with centered frames and weighted
//! overlap-add inversion.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rect,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; n],
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
        }
    }
}

/// Complex `frames × bins` matrix, `bins = frame_length / 2 + 1`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub frame_length: usize,
    pub hop: usize,
    pub window: Window,
    /// Length of the analysed signal, needed to undo the centre padding.
    pub signal_len: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Cached forward/inverse plans for one frame length.
pub struct StftPlan {
    frame: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(frame: usize) -> Result<Self> {
        if frame < 2 || !frame.is_power_of_two() {
            return Err(Error::invalid(format!("stft frame length {frame} is not a power of two")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            frame,
            forward: planner.plan_fft_forward(frame),
            inverse: planner.plan_fft_inverse(frame),
        })
    }

    /// One-sided spectrum of a real frame (zero-padded to the plan length).
    pub fn rfft(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = (0..self.frame)
            .map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.forward.process(&mut buf);
        buf.truncate(self.frame / 2 + 1);
        buf
    }

    /// Real signal from a one-sided spectrum.
    pub fn irfft(&self, half: &[Complex64]) -> Vec<f64> {
        let n = self.frame;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n / 2 {
            buf[n - k] = half[k].conj();
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

pub fn stft(x: &[f64], frame: usize, hop: usize, window: Window) -> Result<Spectrogram> {
    if hop == 0 || hop > frame {
        return Err(Error::invalid(format!("stft hop {hop} must be in 1..={frame}")));
    }
    if x.is_empty() {
        return Err(Error::invalid("stft of an empty signal"));
    }
    let plan = StftPlan::new(frame)?;
    let win = window.coefficients(frame);
    let frames = x.len().div_ceil(hop);
    let pad = frame / 2;
    let bins = frame / 2 + 1;
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![0.0; frame];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            let p = (t * hop + i) as isize - pad as isize;
            *b = if p >= 0 && (p as usize) < x.len() {
                x[p as usize] * win[i]
            } else {
                0.0
            };
        }
        data.extend(plan.rfft(&buf));
    }
    Ok(Spectrogram {
        frames,
        bins,
        frame_length: frame,
        hop,
        window,
        signal_len: x.len(),
        data,
    })
}

/// Weighted overlap-add with window-square normalisation.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    let frame = spec.frame_length;
    let plan = StftPlan::new(frame)?;
    let win = spec.window.coefficients(frame);
    let pad = frame / 2;
    let total = (spec.frames - 1) * spec.hop + frame;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    for t in 0..spec.frames {
        let y = plan.irfft(spec.frame(t));
        let base = t * spec.hop;
        for i in 0..frame {
            acc[base + i] += y[i] * win[i];
            norm[base + i] += win[i] * win[i];
        }
    }
    Ok((0..spec.signal_len)
        .map(|n| {
            let p = n + pad;
            if norm[p] > 1e-10 {
                acc[p] / norm[p]
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_rect_window() {
        let c = 0.3;
        let s = stft(&vec![c; 4096], 256, 128, Window::Rect).unwrap();
        // interior frame: fully inside the signal
        let f = s.frame(10);
        assert!((f[0].norm() - c * 256.0).abs() < 1e-9);
        for b in &f[1..] {
            assert!(b.norm() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_hann_half_overlap() {
        let x: Vec<f64> = (0..5000)
            .map(|i| ((i as f64) * 0.013).sin() * 0.7 + ((i * 7919) % 13) as f64 * 0.01)
            .collect();
        let s = stft(&x, 512, 256, Window::Hann).unwrap();
        assert_eq!(s.frames, 5000usize.div_ceil(256));
        assert_eq!(s.bins, 257);
        let y = istft(&s).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(stft(&[1.0; 100], 64, 65, Window::Hann).is_err());
        assert!(stft(&[1.0; 100], 60, 30, Window::Hann).is_err());
    }
}
