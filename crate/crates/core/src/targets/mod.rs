//! Pseudo-labels for masked prediction: MFCC features, k-means codebooks,
//! and per-frame cluster assignments.

mod kmeans;
mod mfcc;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{count_distinct, kmeans_fit, lloyd, nearest, stack, KMeansConfig};
pub use mfcc::{dct_ii, mel_filterbank, mfcc, mfcc_unnormalized, MfccConfig};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::Tensor;

/// A `frames × dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, frame_rate_hz: f64) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "feature sequence of {frames}x{dim} given {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature sequence".into(),
                index: i,
            });
        }
        Ok(Self {
            frames,
            dim,
            data,
            frame_rate_hz,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Keeps the first `frames` frames.
    pub fn truncate(&mut self, frames: usize) {
        self.frames = self.frames.min(frames);
        self.data.truncate(self.frames * self.dim);
    }

    /// Zero mean and unit variance per dimension. Constant dimensions are
    /// only centred.
    pub fn normalize(&mut self) {
        let n = self.frames as f64;
        for d in 0..self.dim {
            let mean = (0..self.frames).map(|t| self.data[t * self.dim + d]).sum::<f64>() / n;
            let var = (0..self.frames)
                .map(|t| (self.data[t * self.dim + d] - mean).powi(2))
                .sum::<f64>()
                / n;
            let scale = if var > 1e-20 { 1.0 / var.sqrt() } else { 1.0 };
            for t in 0..self.frames {
                let v = &mut self.data[t * self.dim + d];
                *v = (*v - mean) * scale;
            }
        }
    }
}

/// k-means centroids plus fit metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[k, dim]`.
    pub centroids: Tensor,
    /// `mfcc` or `layer:<i>`.
    pub source: String,
    pub seed: u64,
    pub inertia_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSidecar {
    pub k: usize,
    pub dim: usize,
    pub source: String,
    pub seed: u64,
    pub inertia_history: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(f64::NAN)
    }

    /// Writes `<stem>.fatl` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bin = stem.with_extension("fatl");
        fs::write(&bin, checkpoint::encode(&[("centroids", &self.centroids)])).map_err(|e| Error::io(&bin, e))?;
        let side = CodebookSidecar {
            k: self.k(),
            dim: self.dim(),
            source: self.source.clone(),
            seed: self.seed,
            inertia_history: self.inertia_history.clone(),
        };
        let json = stem.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("fatl");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut entries = checkpoint::decode(&bytes)?;
        let centroids = match entries.pop() {
            Some((name, t)) if name == "centroids" && entries.is_empty() && t.rank() == 2 => t,
            _ => return Err(Error::Checkpoint(format!("{} is not a codebook", bin.display()))),
        };
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: CodebookSidecar = serde_json::from_str(&text)?;
        if side.k != centroids.shape()[0] || side.dim != centroids.shape()[1] {
            return Err(Error::Checkpoint("codebook sidecar disagrees with centroid matrix".into()));
        }
        Ok(Self {
            centroids,
            source: side.source,
            seed: side.seed,
            inertia_history: side.inertia_history,
        })
    }
}

/// Per-frame cluster ids for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterTargets {
    pub utt_id: String,
    pub ids: Vec<u32>,
}

/// Nearest-centroid id per frame; ties go to the lowest index.
pub fn assign(features: &FeatureSequence, codebook: &Codebook) -> Result<Vec<u32>> {
    if features.dim != codebook.dim() {
        return Err(Error::Shape(format!(
            "assign: features of dim {} against a codebook of dim {}",
            features.dim,
            codebook.dim()
        )));
    }
    Ok((0..features.frames)
        .map(|t| nearest(features.row(t), codebook.centroids.data(), features.dim).0 as u32)
        .collect())
}

/// Sum of squared distances from each frame to its assigned centroid.
pub fn inertia(features: &FeatureSequence, codebook: &Codebook) -> Result<f64> {
    if features.dim != codebook.dim() {
        return Err(Error::Shape("inertia: dimension mismatch".into()));
    }
    Ok((0..features.frames)
        .map(|t| nearest(features.row(t), codebook.centroids.data(), features.dim).1)
        .sum())
}

/// Fits one codebook over every frame of `features` and assigns each
/// utterance against it.
pub fn fit_targets(
    features: &[(String, FeatureSequence)],
    cfg: &KMeansConfig,
    source: &str,
) -> Result<(Codebook, Vec<ClusterTargets>)> {
    let seqs: Vec<FeatureSequence> = features.iter().map(|(_, f)| f.clone()).collect();
    let (rows, dim) = stack(&seqs)?;
    let codebook = kmeans_fit(&rows, dim, cfg, source)?;
    let targets = features
        .iter()
        .map(|(id, f)| {
            Ok(ClusterTargets {
                utt_id: id.clone(),
                ids: assign(f, &codebook)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((codebook, targets))
}

/// Normalised MFCCs of each waveform, truncated to `frames(len)` frames so
/// they line up with the encoder's output rate.
pub fn mfcc_features(
    waves: &[(String, Waveform)],
    cfg: &MfccConfig,
    frames: impl Fn(usize) -> Option<usize> + Sync,
) -> Result<Vec<(String, FeatureSequence)>> {
    use rayon::prelude::*;
    waves
        .par_iter()
        .map(|(id, w)| {
            let mut f = mfcc(w, cfg)?;
            let n = frames(w.len()).ok_or_else(|| Error::invalid(format!("utterance `{id}` is too short for the encoder")))?;
            if n > f.frames {
                return Err(Error::Shape(format!(
                    "utterance `{id}`: {} MFCC frames for {n} encoder frames",
                    f.frames
                )));
            }
            f.truncate(n);
            Ok((id.clone(), f))
        })
        .collect()
}

/// Writes `<dir>/<utt_id>.bin` as little-endian u32 ids.
pub fn save_targets(dir: &Path, t: &ClusterTargets) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.bin", t.utt_id));
    let bytes: Vec<u8> = t.ids.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_targets(dir: &Path, utt_id: &str) -> Result<ClusterTargets> {
    let path = dir.join(format!("{utt_id}.bin"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!("{} is not a u32 array", path.display())));
    }
    Ok(ClusterTargets {
        utt_id: utt_id.to_string(),
        ids: bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(c: Vec<f64>, dim: usize) -> Codebook {
        let k = c.len() / dim;
        Codebook {
            centroids: Tensor::new(vec![k, dim], c).unwrap(),
            source: "mfcc".into(),
            seed: 0,
            inertia_history: vec![],
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let book = cb(vec![9.0, 9.0, 1.0, 8.0, 8.0, -1.0, 7.0, 5.0], 1);
        let f = FeatureSequence::new(2, 1, vec![0.0, 5.0], 50.0).unwrap();
        // 0.0 is equidistant from centroids 2 (1.0) and 5 (-1.0)
        let ids = assign(&f, &book).unwrap();
        assert_eq!(ids, vec![2, 7]);
        let wrong = FeatureSequence::new(1, 2, vec![0.0, 0.0], 50.0).unwrap();
        assert!(assign(&wrong, &book).is_err());
    }

    #[test]
    fn codebook_and_targets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut book = cb(vec![1.0, 2.0, 3.0, 4.0], 2);
        book.inertia_history = vec![3.0, 1.0];
        book.save(&dir.path().join("cb")).unwrap();
        assert_eq!(Codebook::load(&dir.path().join("cb")).unwrap(), book);
        let t = ClusterTargets {
            utt_id: "u".into(),
            ids: vec![0, 7, 31],
        };
        save_targets(dir.path(), &t).unwrap();
        assert_eq!(load_targets(dir.path(), "u").unwrap(), t);
    }
}
