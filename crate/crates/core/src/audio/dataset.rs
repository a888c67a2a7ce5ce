//! JSON-lines manifests and noisy-dataset synthesis.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::NoiseBank;
use super::synth::{synth_utterance, SpeechSynthConfig, SymbolInventory};
use super::wav::{load_wav, save_wav};
use crate::error::{Error, Result};
use crate::rng;

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_scale: Option<f64>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

fn relative_to(base_dir: &Path, target: &Path) -> String {
    target.strip_prefix(base_dir).unwrap_or(target).to_string_lossy().into_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub seed: u64,
    pub noise_corpus: PathBuf,
    pub output_manifest: PathBuf,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low_db <= self.snr_high_db) {
            return Err(Error::Config(format!(
                "snr_low_db {} exceeds snr_high_db {}",
                self.snr_low_db, self.snr_high_db
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub written: usize,
    pub skipped: Vec<String>,
}

impl SynthSummary {
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty()
    }
}

/// Mixes every clean utterance with a random noise clip at an SNR drawn
/// uniformly from the configured band. Each utterance's randomness comes
/// from its own stream keyed by `(seed, index)`, so output does not depend on
/// scheduling. Unreadable inputs are skipped and reported.
pub fn synth_dataset(clean_manifest: &Path, cfg: &SimulationConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let clean = read_manifest(clean_manifest)?;
    let bank = NoiseBank::from_manifest(&cfg.noise_corpus)?;
    let out_dir = cfg.output_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stem = cfg
        .output_manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mix".into());
    let audio_dir = out_dir.join(format!("{stem}_audio"));
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let results: Vec<std::result::Result<ManifestEntry, String>> = clean
        .par_iter()
        .enumerate()
        .map(|(index, entry)| {
            let clean_path = resolve(clean_manifest, &entry.audio);
            let wav = match load_wav(&clean_path) {
                Ok(w) => w,
                Err(err) => {
                    log::warn!("skipping `{}`: {err}", entry.id);
                    return Err(entry.id.clone());
                }
            };
            let utt_seed = rng::derive_seed(cfg.seed, &[index as u64]);
            let mut r = rng::stream(utt_seed, &[]);
            let (noisy, rec) = match bank.mix(&wav, [cfg.snr_low_db, cfg.snr_high_db], &mut r) {
                Ok(m) => m,
                Err(err) => {
                    log::warn!("skipping `{}`: {err}", entry.id);
                    return Err(entry.id.clone());
                }
            };
            let noisy_path = audio_dir.join(format!("{}.wav", entry.id));
            if let Err(err) = save_wav(&noisy_path, &noisy) {
                log::warn!("skipping `{}`: {err}", entry.id);
                return Err(entry.id.clone());
            }
            let noisy_rel = relative_to(&out_dir, &noisy_path);
            let clean_rel = pathdiff(&out_dir, &clean_path);
            Ok(ManifestEntry {
                id: entry.id.clone(),
                audio: noisy_rel.clone(),
                transcript: entry.transcript.clone(),
                clean_path: Some(clean_rel),
                noisy_path: Some(noisy_rel),
                snr_db: Some(rec.snr_db),
                noise_id: Some(rec.noise_id),
                noise_offset: Some(rec.noise_offset),
                seed: Some(utt_seed),
                clip_scale: (rec.clip_scale != 1.0).then_some(rec.clip_scale),
            })
        })
        .collect();

    let mut summary = SynthSummary::default();
    let mut written = Vec::new();
    for r in results {
        match r {
            Ok(e) => written.push(e),
            Err(id) => summary.skipped.push(id),
        }
    }
    summary.written = written.len();
    write_manifest(&cfg.output_manifest, &written)?;
    Ok(summary)
}

/// Relative path from `base` to `target` using `..` where needed.
pub fn pathdiff(base: &Path, target: &Path) -> String {
    let b: Vec<_> = base.components().collect();
    let t: Vec<_> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out.to_string_lossy().into_owned()
}

/// Writes `count` synthetic utterances (WAV + manifest with transcripts).
pub fn build_speech_corpus(
    manifest: &Path,
    prefix: &str,
    count: usize,
    inv: &SymbolInventory,
    cfg: &SpeechSynthConfig,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let audio_dir = dir.join(format!("{prefix}_audio"));
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let entries = (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::tag(prefix), i as u64]);
            let (wav, labels) = synth_utterance(inv, cfg, &mut r);
            let id = format!("{prefix}-{i:05}");
            let path = audio_dir.join(format!("{id}.wav"));
            save_wav(&path, &wav)?;
            let transcript = labels.iter().map(|&l| inv.symbols[l].as_str()).collect::<Vec<_>>().join(" ");
            Ok(ManifestEntry {
                id,
                audio: relative_to(&dir, &path),
                transcript: Some(transcript),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(manifest, &entries)?;
    Ok(entries)
}

/// Writes `count` noise clips, cycling through the noise families.
pub fn build_noise_corpus(
    manifest: &Path,
    count: usize,
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let audio_dir = dir.join("noise_audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let bank = NoiseBank::synthetic(count, seconds, sample_rate, seed)?;
    let entries = bank
        .clips()
        .iter()
        .map(|(id, wav)| {
            let path = audio_dir.join(format!("{id}.wav"));
            save_wav(&path, wav)?;
            Ok(ManifestEntry {
                id: id.clone(),
                audio: relative_to(&dir, &path),
                noise_id: id.split('-').next().map(str::to_string),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(manifest, &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pathdiff_walks_up() {
        assert_eq!(pathdiff(Path::new("/a/b/c"), Path::new("/a/d/e.wav")), "../../d/e.wav");
        assert_eq!(pathdiff(Path::new("/a"), Path::new("/a/x.wav")), "x.wav");
    }

    #[test]
    fn manifest_round_trip_skips_absent_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let e = ManifestEntry {
            id: "u1".into(),
            audio: "a/u1.wav".into(),
            snr_db: Some(2.5),
            ..Default::default()
        };
        write_manifest(&p, std::slice::from_ref(&e)).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"id\":\"u1\",\"audio\":\"a/u1.wav\",\"snr_db\":2.5}\n");
        assert_eq!(read_manifest(&p).unwrap(), vec![e]);
    }

    #[test]
    fn invalid_band_is_rejected() {
        let cfg = SimulationConfig {
            snr_low_db: 5.0,
            snr_high_db: 0.0,
            seed: 0,
            noise_corpus: "n".into(),
            output_manifest: "o".into(),
        };
        assert!(cfg.validate().is_err());
    }
}
