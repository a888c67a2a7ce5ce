//! Audio I/O, STFT, SNR-controlled mixing, and corpus synthesis.

pub mod dataset;
mod mix;
mod noise;
pub mod stft;
pub mod synth;
mod wav;

pub use dataset::{
    build_noise_corpus, build_speech_corpus, read_manifest, resolve, synth_dataset, write_manifest, ManifestEntry,
    SimulationConfig, SynthSummary,
};
pub use mix::{declip, fit_noise, mean_power, mix_at_snr};
pub use noise::{MixRecord, NoiseBank};
pub use stft::{istft, stft, Spectrogram, StftPlan, Window};
pub use wav::{load_wav, quantize, save_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Fails on empty or non-finite input.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "waveform sample".into(),
                index: i,
            });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
