//! Bundled synthetic corpora: "speech" built from per-symbol tone complexes
//! with known transcripts, and three families of noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Waveform;

/// The symbol set of the synthetic language. Each symbol is rendered as a
/// sum of three partials at symbol-specific frequencies.
#[derive(Clone, Debug)]
pub struct SymbolInventory {
    pub symbols: Vec<String>,
    partials: Vec<[f64; 3]>,
}

impl SymbolInventory {
    pub fn new(n: usize) -> Self {
        assert!((2..=26).contains(&n), "inventory size must be in 2..=26");
        let symbols = (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let partials = (0..n)
            .map(|s| {
                [
                    260.0 + 95.0 * s as f64,
                    1150.0 + 135.0 * ((s * 5) % n) as f64,
                    2450.0 + 175.0 * ((s * 3) % n) as f64,
                ]
            })
            .collect();
        Self { symbols, partials }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn partials(&self, symbol: usize) -> [f64; 3] {
        self.partials[symbol]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechSynthConfig {
    pub num_symbols: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_unit_ms: f64,
    pub max_unit_ms: f64,
    pub min_gap_ms: f64,
    pub max_gap_ms: f64,
    pub edge_ms: f64,
    pub sample_rate: u32,
}

impl Default for SpeechSynthConfig {
    fn default() -> Self {
        Self {
            num_symbols: 8,
            min_symbols: 2,
            max_symbols: 5,
            min_unit_ms: 80.0,
            max_unit_ms: 130.0,
            min_gap_ms: 15.0,
            max_gap_ms: 45.0,
            edge_ms: 40.0,
            sample_rate: 16000,
        }
    }
}

fn ms(sr: u32, v: f64) -> usize {
    (v * sr as f64 / 1000.0).round() as usize
}

/// Renders one random utterance; returns the audio and its symbol ids.
pub fn synth_utterance(inv: &SymbolInventory, cfg: &SpeechSynthConfig, rng: &mut impl Rng) -> (Waveform, Vec<usize>) {
    let sr = cfg.sample_rate;
    let n = rng.random_range(cfg.min_symbols..=cfg.max_symbols);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..inv.len())).collect();
    let mut out = vec![0.0; ms(sr, cfg.edge_ms)];
    for (i, &s) in labels.iter().enumerate() {
        if i > 0 {
            let gap = rng.random_range(cfg.min_gap_ms..=cfg.max_gap_ms);
            out.extend(std::iter::repeat_n(0.0, ms(sr, gap)));
        }
        let dur = ms(sr, rng.random_range(cfg.min_unit_ms..=cfg.max_unit_ms));
        let jitter: f64 = rng.random_range(0.98..1.02);
        let amp: f64 = rng.random_range(0.6..1.0);
        let phases: [f64; 3] = [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ];
        let freqs = inv.partials(s);
        let ramp = ms(sr, 10.0).min(dur / 2).max(1);
        for t in 0..dur {
            let env = if t < ramp {
                0.5 - 0.5 * (PI * t as f64 / ramp as f64).cos()
            } else if t >= dur - ramp {
                0.5 - 0.5 * (PI * (dur - t) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let time = t as f64 / sr as f64;
            let v: f64 = [1.0, 0.6, 0.35]
                .iter()
                .zip(freqs.iter().zip(phases))
                .map(|(w, (f, ph))| w * (2.0 * PI * f * jitter * time + ph).sin())
                .sum();
            out.push(0.25 * amp * env * v);
        }
    }
    out.extend(std::iter::repeat_n(0.0, ms(sr, cfg.edge_ms)));
    (Waveform::new(out, sr).expect("finite synthetic audio"), labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Babble,
    Pulsed,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Babble, NoiseKind::Pulsed];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Babble => "babble",
            NoiseKind::Pulsed => "pulsed",
        }
    }
}

/// Two-pole resonator centred at `freq` Hz.
fn resonate(x: &[f64], freq: f64, r: f64, sr: f64) -> Vec<f64> {
    let c = 2.0 * r * (2.0 * PI * freq / sr).cos();
    let (mut y1, mut y2) = (0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = (1.0 - r) * v + c * y1 - r * r * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Noise clip of `seconds`, normalised to RMS 0.1.
pub fn synth_noise(kind: NoiseKind, seconds: f64, sample_rate: u32, rng: &mut impl Rng) -> Waveform {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let mut x = match kind {
        NoiseKind::White => white,
        NoiseKind::Babble => {
            let mut acc = vec![0.0; n];
            for _ in 0..4 {
                let f = rng.random_range(300.0..3000.0);
                let rate = rng.random_range(2.0..6.0);
                let ph = rng.random_range(0.0..2.0 * PI);
                let band = resonate(&white, f, 0.97, sr);
                for (i, (a, b)) in acc.iter_mut().zip(band).enumerate() {
                    let m = 0.6 + 0.4 * (2.0 * PI * rate * i as f64 / sr + ph).sin();
                    *a += m * b;
                }
            }
            acc
        }
        NoiseKind::Pulsed => {
            let mut out = vec![0.0; n];
            let mut i = 0;
            while i < n {
                let on = (rng.random_range(0.03..0.12) * sr) as usize;
                let off = (rng.random_range(0.05..0.25) * sr) as usize;
                for j in i..(i + on).min(n) {
                    out[j] = white[j] - if j > 0 { 0.9 * white[j - 1] } else { 0.0 };
                }
                i += on + off;
            }
            out
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    Waveform::new(x, sample_rate).expect("finite noise")
}
