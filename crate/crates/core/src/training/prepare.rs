use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{FatConfig, ImstConfig};
use crate::audio::{NoiseBank, Waveform};
use crate::error::Result;
use crate::frontends::{Frontend, FrontendPool};
use crate::rng;

/// Everything needed to rebuild one FAT presentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepRecord {
    pub seed: u64,
    pub snr_db: f64,
    pub noise_id: String,
    pub noise_offset: usize,
    pub frontend: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub enh: Waveform,
    pub noisy: Waveform,
    pub record: PrepRecord,
}

/// Mixing stream of a presentation. The baseline's noisy mode uses the same
/// stream so both see identical noisy audio for a given seed.
pub(crate) fn mix_stream(seed: u64) -> rng::Rng {
    rng::stream(seed, &[rng::tag("mix")])
}

fn frontend_stream(seed: u64) -> rng::Rng {
    rng::stream(seed, &[rng::tag("frontend")])
}

/// Mixes `clean` at an SNR drawn from the configured range, draws a
/// front-end from `pool`, and enhances.
pub fn fat_prepare(clean: &Waveform, noise: &NoiseBank, pool: &FrontendPool, cfg: &FatConfig, seed: u64) -> Result<Prepared> {
    let fe = pool.sample(&mut frontend_stream(seed))?.clone();
    prepare_with(clean, noise, cfg, seed, &fe)
}

/// As [`fat_prepare`] with the front-end already chosen.
pub(crate) fn prepare_with(
    clean: &Waveform,
    noise: &NoiseBank,
    cfg: &FatConfig,
    seed: u64,
    fe: &Arc<Frontend>,
) -> Result<Prepared> {
    let (noisy, mix) = noise.mix(clean, cfg.snr_range, &mut mix_stream(seed))?;
    let enh = fe.enhance(&noisy)?;
    Ok(Prepared {
        enh,
        noisy,
        record: PrepRecord {
            seed,
            snr_db: mix.snr_db,
            noise_id: mix.noise_id,
            noise_offset: mix.noise_offset,
            frontend: Some(fe.id().to_string()),
        },
    })
}

/// Whole-utterance enhancements keyed by front-end id, so a front-end runs
/// at most once per utterance.
#[derive(Default)]
pub struct EnhanceCache {
    entries: Vec<(String, Waveform)>,
}

impl EnhanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, w: Waveform) {
        if self.get(id).is_none() {
            self.entries.push((id.to_string(), w));
        }
    }

    pub fn get(&self, id: &str) -> Option<&Waveform> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, w)| w)
    }

    fn get_or_enhance(&mut self, fe: &Frontend, noisy: &Waveform) -> Result<&Waveform> {
        if self.get(fe.id()).is_none() {
            let w = fe.enhance(noisy)?;
            self.entries.push((fe.id().to_string(), w));
        }
        Ok(self.get(fe.id()).expect("inserted above"))
    }
}

/// Splits `noisy` into consecutive segments and replaces each, with
/// probability `p_enh`, by the same time range of an enhanced rendering.
/// Returns the mixed waveform and the front-end used per segment.
pub fn imst_apply(
    noisy: &Waveform,
    pool: &FrontendPool,
    cfg: &ImstConfig,
    rng: &mut impl Rng,
) -> Result<(Waveform, Vec<Option<String>>)> {
    imst_apply_cached(noisy, pool, cfg, rng, &mut EnhanceCache::new())
}

pub fn imst_apply_cached(
    noisy: &Waveform,
    pool: &FrontendPool,
    cfg: &ImstConfig,
    rng: &mut impl Rng,
    cache: &mut EnhanceCache,
) -> Result<(Waveform, Vec<Option<String>>)> {
    cfg.validate()?;
    let seg = cfg.segment_samples(noisy.sample_rate);
    let fixed = if cfg.per_segment_resampling {
        None
    } else {
        Some(pool.sample(rng)?.clone())
    };
    let mut out = noisy.samples().to_vec();
    let mut styles = Vec::with_capacity(noisy.len().div_ceil(seg));
    for start in (0..noisy.len()).step_by(seg) {
        let end = (start + seg).min(noisy.len());
        if rng.random::<f64>() >= cfg.p_enh {
            styles.push(None);
            continue;
        }
        let fe = match &fixed {
            Some(f) => f.clone(),
            None => pool.sample(rng)?.clone(),
        };
        let enh = cache.get_or_enhance(&fe, noisy)?;
        out[start..end].copy_from_slice(&enh.samples()[start..end]);
        styles.push(Some(fe.id().to_string()));
    }
    Ok((Waveform::new(out, noisy.sample_rate)?, styles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn wave(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f64 * 0.05).sin() * 0.4).collect(), 16000).unwrap()
    }

    #[test]
    fn identity_pool_passes_noisy_through() {
        let bank = NoiseBank::synthetic(3, 1.0, 16000, 4).unwrap();
        let cfg = FatConfig {
            include_identity_frontend: true,
            ..FatConfig::default()
        };
        let p = fat_prepare(&wave(5000), &bank, &FrontendPool::identity(), &cfg, 11).unwrap();
        assert_eq!(p.enh, p.noisy);
        assert!((5.0..=10.0).contains(&p.record.snr_db));
        let again = fat_prepare(&wave(5000), &bank, &FrontendPool::identity(), &cfg, 11).unwrap();
        assert_eq!(again.noisy, p.noisy);
        assert_eq!(again.record, p.record);
    }

    #[test]
    fn imst_extremes() {
        let noisy = wave(8000);
        let pool = FrontendPool::identity();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let off = ImstConfig {
            segment_length_s: 0.1,
            p_enh: 0.0,
            ..ImstConfig::default()
        };
        let (out, styles) = imst_apply(&noisy, &pool, &off, &mut r).unwrap();
        assert_eq!(out, noisy);
        assert_eq!(styles.len(), 5);
        assert!(styles.iter().all(Option::is_none));
        let on = ImstConfig { p_enh: 1.0, ..off };
        let (out, styles) = imst_apply(&noisy, &pool, &on, &mut r).unwrap();
        assert_eq!(out, noisy);
        assert!(styles.iter().all(|s| s.as_deref() == Some("identity")));
    }
}
