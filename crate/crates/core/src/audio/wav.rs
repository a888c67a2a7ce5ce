use std::fs;
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result, WavError};

/// Reads a mono 16-bit PCM RIFF/WAVE file, scaling samples by 1/32768.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let wav_err = |kind| Error::Wav {
        path: path.to_path_buf(),
        kind,
    };
    let (sample_rate, pcm) = parse(&bytes).map_err(wav_err)?;
    let samples = pcm.iter().map(|&s| s as f64 / 32768.0).collect();
    Waveform::new(samples, sample_rate)
}

/// Writes mono 16-bit PCM, rounding to nearest and saturating at full scale.
pub fn save_wav(path: &Path, wav: &Waveform) -> Result<()> {
    fs::write(path, encode(wav)).map_err(|e| Error::io(path, e))
}

pub fn encode(wav: &Waveform) -> Vec<u8> {
    let data_len = (wav.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in wav.samples() {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn parse(b: &[u8]) -> std::result::Result<(u32, Vec<i16>), WavError> {
    if b.len() < 12 {
        return Err(WavError::Truncated);
    }
    if &b[0..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err(WavError::NotRiff);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let size = u32::from_le_bytes(b[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if body + 16 > b.len() || size < 16 {
                return Err(WavError::Truncated);
            }
            let u16_at = |o: usize| u16::from_le_bytes(b[body + o..body + o + 2].try_into().unwrap());
            let rate = u32::from_le_bytes(b[body + 4..body + 8].try_into().unwrap());
            fmt = Some((u16_at(0), u16_at(2), rate, u16_at(14)));
        } else if id == b"data" {
            let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
            if channels != 1 {
                return Err(WavError::MultiChannel(channels));
            }
            if format != 1 || bits != 16 {
                return Err(WavError::NotPcm16 { format, bits });
            }
            if body + size > b.len() {
                return Err(WavError::Truncated);
            }
            let pcm = b[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            return Ok((rate, pcm));
        }
        pos = body + size + (size & 1);
    }
    if fmt.is_none() {
        Err(WavError::Truncated)
    } else {
        Err(WavError::MissingChunk("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(channels: u16, format: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&32000u32.to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn scaling_definition() {
        let data: Vec<u8> = [16384i16, -32768, 0, 32767].iter().flat_map(|v| v.to_le_bytes()).collect();
        let (rate, pcm) = parse(&header(1, 1, 16, &data)).unwrap();
        assert_eq!(rate, 16000);
        let w: Vec<f64> = pcm.iter().map(|&s| s as f64 / 32768.0).collect();
        assert_eq!(w[0], 0.5);
        assert_eq!(w[1], -1.0);
    }

    #[test]
    fn typed_failures() {
        let data = [0u8; 8];
        assert_eq!(parse(&header(2, 1, 16, &data)), Err(WavError::MultiChannel(2)));
        assert_eq!(
            parse(&header(1, 3, 32, &data)),
            Err(WavError::NotPcm16 { format: 3, bits: 32 })
        );
        let full = header(1, 1, 16, &data);
        assert_eq!(parse(&full[..30]), Err(WavError::Truncated));
        assert_eq!(parse(b"RIFX0000WAVE"), Err(WavError::NotRiff));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (-200i16..200).map(|v| v * 97).flat_map(|v| v.to_le_bytes()).collect();
        let bytes = header(1, 1, 16, &data);
        let p = dir.path().join("a.wav");
        fs::write(&p, &bytes).unwrap();
        let w = load_wav(&p).unwrap();
        let q = dir.path().join("b.wav");
        save_wav(&q, &w).unwrap();
        assert_eq!(fs::read(&q).unwrap(), bytes);
    }
}
