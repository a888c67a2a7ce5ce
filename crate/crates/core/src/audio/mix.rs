use super::Waveform;
use crate::error::{Error, Result};

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `len` samples of `noise` read circularly from `offset`.
pub fn fit_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Adds `noise` to `clean` at `snr_db`. Noise longer than the clean signal is
/// truncated; shorter noise is looped. Returns the mixture and the gain applied
/// to the noise.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "sample rate mismatch: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    let region = if noise.len() >= clean.len() {
        noise.samples()[..clean.len()].to_vec()
    } else {
        fit_noise(noise.samples(), clean.len(), 0)
    };
    let p_clean = mean_power(clean.samples());
    let p_noise = mean_power(&region);
    if p_clean == 0.0 || p_noise == 0.0 {
        return Err(Error::invalid("mix_at_snr: silent clean or noise signal"));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mixed = clean.samples().iter().zip(&region).map(|(c, n)| c + gain * n).collect();
    Ok((Waveform::new(mixed, clean.sample_rate)?, gain))
}

/// Scales the whole signal to a 0.99 peak when any sample exceeds full
/// scale. Returns the factor applied (1.0 when untouched).
pub fn declip(w: &mut Waveform) -> f64 {
    let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= 1.0 {
        return 1.0;
    }
    let f = 0.99 / peak;
    w.samples_mut().iter_mut().for_each(|v| *v *= f);
    f
}
