use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{si_snr, Frontend, FrontendSpec};
use crate::audio::{load_wav, read_manifest, resolve, Waveform};
use crate::error::{Error, Result};
use crate::numerics::{collect_grads, AdamConfig, AdamState, Gradients, Graph};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub snr_range: [f64; 2],
}

impl Default for FrontendTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            lr: 2e-3,
            snr_range: [0.0, 5.0],
        }
    }
}

/// A noisy mixture and the clean signal it was made from.
#[derive(Clone, Debug)]
pub struct NoisyPair {
    pub noisy: Waveform,
    pub clean: Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean SI-SNR improvement over the noisy input on the validation set.
    pub val_improvement_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_improvement_db: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation weights (epoch 0 is the initialisation).
    pub frontend: Frontend,
    pub log: TrainLog,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<(usize, String)>,
}

/// Mean SI-SNR improvement of `fe` over the unprocessed mixtures.
pub fn mean_improvement(fe: &Frontend, pairs: &[NoisyPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in pairs {
        let enh = fe.enhance(&p.noisy)?;
        total += si_snr(enh.samples(), p.clean.samples())? - si_snr(p.noisy.samples(), p.clean.samples())?;
    }
    Ok(total / pairs.len() as f64)
}

/// The per-utterance training loss of a front-end, as a fresh graph.
pub fn frontend_loss(fe: &Frontend, pair: &NoisyPair) -> Result<(Graph, f64)> {
    let mut g = Graph::new();
    let l = fe.loss(&mut g, &fe.store, pair.noisy.samples(), pair.clean.samples())?;
    g.backward(l)?;
    let v = g.value(l).item();
    Ok((g, v))
}

/// Trains on in-memory pairs and keeps the best-validation weights.
pub fn train_frontend_pairs(
    spec: FrontendSpec,
    train: &[NoisyPair],
    val: &[NoisyPair],
    cfg: &FrontendTrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("front-end batch_size must be positive".into()));
    }
    let mut fe = Frontend::new(spec)?;
    if fe.is_identity() {
        return Ok(TrainOutcome {
            frontend: fe,
            log: TrainLog::default(),
            diverged: None,
        });
    }
    let mut adam = AdamState::new(
        &fe.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut log = TrainLog {
        best_val_improvement_db: mean_improvement(&fe, val)?,
        ..TrainLog::default()
    };
    let mut best = fe.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(fe.spec.seed, &[rng::tag("frontend-epoch"), epoch as u64]);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new(&fe.store);
            for &i in batch {
                let (g, v) = frontend_loss(&fe, &train[i])?;
                if !v.is_finite() {
                    log::warn!("front-end `{}` diverged in epoch {epoch}", fe.spec.id);
                    return Ok(TrainOutcome {
                        frontend: best,
                        log,
                        diverged: Some((epoch, format!("non-finite loss on training pair {i}"))),
                    });
                }
                loss_sum += v;
                collect_grads(&g, &mut grads, 1.0 / batch.len() as f64);
            }
            adam.step(&mut fe.store, &grads, cfg.lr);
        }
        fe.trained_epochs = epoch;
        let val_db = mean_improvement(&fe, val)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len().max(1) as f64,
            val_improvement_db: val_db,
        });
        log::info!(
            "front-end `{}` epoch {epoch}: val SI-SNR improvement {val_db:.2} dB",
            fe.spec.id
        );
        if val_db > log.best_val_improvement_db {
            log.best_val_improvement_db = val_db;
            log.best_epoch = epoch;
            best = fe.clone();
        }
    }
    Ok(TrainOutcome {
        frontend: best,
        log,
        diverged: None,
    })
}

/// Loads `(noisy, clean)` pairs from a simulated manifest.
pub fn load_pairs(manifest: &Path) -> Result<Vec<NoisyPair>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let noisy_rel = e.noisy_path.as_deref().unwrap_or(&e.audio);
            let clean_rel = e
                .clean_path
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("manifest entry `{}` has no clean_path", e.id)))?;
            Ok(NoisyPair {
                noisy: load_wav(&resolve(manifest, noisy_rel))?,
                clean: load_wav(&resolve(manifest, clean_rel))?,
            })
        })
        .collect()
}

/// Trains from manifests and writes the best checkpoint, its JSON sidecar,
/// and the training log into `out_dir`. On divergence the last good
/// checkpoint is still written before the error is returned.
pub fn train_frontend(
    spec: FrontendSpec,
    train_manifest: &Path,
    val_manifest: &Path,
    cfg: &FrontendTrainConfig,
    out_dir: &Path,
) -> Result<(PathBuf, TrainLog)> {
    let train = load_pairs(train_manifest)?;
    let val = load_pairs(val_manifest)?;
    let outcome = train_frontend_pairs(spec, &train, &val, cfg)?;
    let ckpt = outcome.frontend.save(out_dir, Some(cfg.snr_range))?;
    let log_path = out_dir.join(format!("{}.log.json", outcome.frontend.id()));
    std::fs::write(&log_path, serde_json::to_string_pretty(&outcome.log)? + "\n").map_err(|e| Error::io(&log_path, e))?;
    if let Some((step, detail)) = outcome.diverged {
        return Err(Error::Diverged { step, detail });
    }
    Ok((ckpt, outcome.log))
}
