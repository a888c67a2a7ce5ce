use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{read_manifest, resolve};
use super::mix::{declip, fit_noise, mix_at_snr};
use super::synth::{synth_noise, NoiseKind};
use super::wav::load_wav;
use super::Waveform;
use crate::error::{Error, Result};
use crate::rng;

/// How one noisy mixture was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub noise_id: String,
    pub noise_offset: usize,
    pub snr_db: f64,
    pub gain: f64,
    /// Declipping factor, 1.0 when untouched.
    pub clip_scale: f64,
}

/// In-memory noise clips to draw mixtures from.
#[derive(Clone, Debug, Default)]
pub struct NoiseBank {
    clips: Vec<(String, Waveform)>,
}

impl NoiseBank {
    pub fn new(clips: Vec<(String, Waveform)>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("noise bank is empty"));
        }
        Ok(Self { clips })
    }

    /// Loads every readable clip listed in a noise manifest; unreadable
    /// clips are skipped with a warning.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let clips = read_manifest(path)?
            .iter()
            .filter_map(|e| match load_wav(&resolve(path, &e.audio)) {
                Ok(w) => Some((e.id.clone(), w)),
                Err(err) => {
                    log::warn!("skipping noise `{}`: {err}", e.id);
                    None
                }
            })
            .collect();
        Self::new(clips)
    }

    /// `count` clips cycling through the synthetic noise families.
    pub fn synthetic(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Result<Self> {
        let clips = (0..count)
            .map(|i| {
                let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
                let mut r = rng::stream(seed, &[rng::tag("noise"), i as u64]);
                (
                    format!("{}-{i:03}", kind.name()),
                    synth_noise(kind, seconds, sample_rate, &mut r),
                )
            })
            .collect();
        Self::new(clips)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[(String, Waveform)] {
        &self.clips
    }

    /// Mixes `clean` with a random clip at a random offset and an SNR drawn
    /// uniformly from `[lo, hi]`, then declips.
    pub fn mix(&self, clean: &Waveform, snr: [f64; 2], rng: &mut impl Rng) -> Result<(Waveform, MixRecord)> {
        let snr_db = if snr[1] > snr[0] {
            rng.random_range(snr[0]..=snr[1])
        } else {
            snr[0]
        };
        let (id, noise) = &self.clips[rng.random_range(0..self.clips.len())];
        let offset = rng.random_range(0..noise.len());
        let fitted = Waveform::new(fit_noise(noise.samples(), clean.len(), offset), noise.sample_rate)?;
        let (mut noisy, gain) = mix_at_snr(clean, &fitted, snr_db)?;
        let clip_scale = declip(&mut noisy);
        Ok((
            noisy,
            MixRecord {
                noise_id: id.clone(),
                noise_offset: offset,
                snr_db,
                gain,
                clip_scale,
            },
        ))
    }
}
