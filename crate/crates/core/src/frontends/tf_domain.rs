//! Magnitude-mask enhancer in the STFT domain. The noisy phase is reused.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{istft, stft, Spectrogram, Window};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Gru, Linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TfDomainHyper {
    pub frame: usize,
    pub hop: usize,
    pub hidden: usize,
    /// GRU mask estimator when true, otherwise a 3-frame convolution.
    pub recurrent: bool,
}

impl Default for TfDomainHyper {
    fn default() -> Self {
        Self {
            frame: 512,
            hop: 128,
            hidden: 64,
            recurrent: true,
        }
    }
}

impl TfDomainHyper {
    pub fn bins(&self) -> usize {
        self.frame / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame.is_power_of_two() || self.hop == 0 || self.hop > self.frame / 2 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid TF-domain front-end hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Temporal {
    Gru(Gru),
    Conv(Conv1d),
}

#[derive(Clone, Debug)]
pub struct TfDomainEnhancer {
    pub hyper: TfDomainHyper,
    input: Linear,
    temporal: Temporal,
    output: Linear,
}

const LOG_FLOOR: f64 = 1e-4;

impl TfDomainEnhancer {
    pub fn new(store: &mut ParamStore, hyper: TfDomainHyper, rng: &mut impl Rng) -> Result<Self> {
        hyper.validate()?;
        let (bins, h) = (hyper.bins(), hyper.hidden);
        let input = Linear::fan_in(store, "tf.input", bins, h, true, rng);
        let temporal = if hyper.recurrent {
            Temporal::Gru(Gru::new(store, "tf.gru", h, h, rng))
        } else {
            Temporal::Conv(Conv1d::new(store, "tf.conv", h, h, 3, 1, 1, 1, true, rng))
        };
        let output = Linear::fan_in(store, "tf.output", h, bins, true, rng);
        Ok(Self {
            hyper,
            input,
            temporal,
            output,
        })
    }

    pub fn analyse(&self, x: &[f64]) -> Result<Spectrogram> {
        stft(x, self.hyper.frame, self.hyper.hop, Window::Hann)
    }

    /// Per-frame normalised log magnitudes, `[frames, bins]`.
    pub fn features(spec: &Spectrogram) -> Result<Tensor> {
        let data = spec.data.iter().map(|c| (c.norm() + LOG_FLOOR).ln()).collect();
        Tensor::new(vec![spec.frames, spec.bins], data)
    }

    /// Mask in `[0, 1]` of shape `[frames, bins]`.
    pub fn mask(&self, g: &mut Graph, store: &ParamStore, feats: Tensor) -> Result<Var> {
        let x = g.constant(feats);
        let x = g.layer_norm(x, 1e-5);
        let h = self.input.forward(g, store, x)?;
        let h = g.relu(h);
        let h = match &self.temporal {
            Temporal::Gru(gru) => gru.forward(g, store, h)?,
            Temporal::Conv(conv) => {
                let y = conv.forward(g, store, h)?;
                g.relu(y)
            }
        };
        let m = self.output.forward(g, store, h)?;
        Ok(g.sigmoid(m))
    }
}

/// Applies a real `[frames, bins]` mask to the spectrum and resynthesises.
pub fn apply_mask(spec: &Spectrogram, mask: &[f64]) -> Result<Vec<f64>> {
    if mask.len() != spec.data.len() {
        return Err(Error::Shape(format!(
            "apply_mask: mask of {} values for a {}x{} spectrogram",
            mask.len(),
            spec.frames,
            spec.bins
        )));
    }
    let mut masked = spec.clone();
    for (c, &m) in masked.data.iter_mut().zip(mask) {
        *c *= m;
    }
    istft(&masked)
}

/// Ideal amplitude mask `min(|S| / |Y|, 1)`; bins where the mixture is
/// silent get 1.
pub fn ideal_amplitude_mask(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Tensor> {
    if clean.data.len() != noisy.data.len() {
        return Err(Error::Shape("ideal_amplitude_mask: spectrogram sizes differ".into()));
    }
    let data = clean
        .data
        .iter()
        .zip(&noisy.data)
        .map(|(s, y)| {
            let ny = y.norm();
            if ny > 0.0 {
                (s.norm() / ny).min(1.0)
            } else {
                1.0
            }
        })
        .collect();
    Tensor::new(vec![noisy.frames, noisy.bins], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 * 0.05).sin() * 0.4 + ((i * 31) % 7) as f64 * 0.01)
            .collect()
    }

    #[test]
    fn ones_mask_is_identity() {
        let x = signal(3000);
        let s = stft(&x, 512, 128, Window::Hann).unwrap();
        let y = apply_mask(&s, &vec![1.0; s.data.len()]).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn zeros_mask_is_silence() {
        let x = signal(2000);
        let s = stft(&x, 512, 128, Window::Hann).unwrap();
        let y = apply_mask(&s, &vec![0.0; s.data.len()]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }
}
