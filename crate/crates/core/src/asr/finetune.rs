use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ctc::ctc_loss;
use super::vocab::Vocab;
use crate::audio::Waveform;
use crate::encoder::SslModel;
use crate::error::{Error, Result};
use crate::numerics::{collect_grads, AdamConfig, AdamState, Gradients, Graph, ParamId};
use crate::rng::{derive_seed, tag};
use crate::training::batch_index;

/// A transcribed utterance with its CTC class ids.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub id: String,
    pub audio: Waveform,
    pub labels: Vec<usize>,
}

impl LabeledUtterance {
    pub fn new(id: impl Into<String>, audio: Waveform, transcript: &str, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            audio,
            labels: vocab.encode(transcript)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps during which only the CTC head is trained.
    pub freeze_encoder_steps: usize,
    /// Keeps the convolutional feature extractor frozen for the whole run.
    pub freeze_feature_extractor: bool,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            lr: 5e-4,
            freeze_encoder_steps: 200,
            freeze_feature_extractor: true,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid fine-tuning config {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    /// Mean per-utterance CTC loss of every step.
    pub losses: Vec<f64>,
}

/// Mean CTC loss of `batch` on clean audio fed to both branches, with
/// gradients when `grads` is given.
pub fn ctc_batch_loss(model: &SslModel, batch: &[&LabeledUtterance], grads: Option<&mut Gradients>) -> Result<f64> {
    let want = grads.is_some();
    let scale = 1.0 / batch.len().max(1) as f64;
    let parts: Vec<(f64, Option<Gradients>)> = batch
        .par_iter()
        .map(|u| {
            let mut g = if want { Graph::new() } else { Graph::inference() };
            let x = u.audio.samples();
            let f = model.forward_two_branch(&mut g, x, x, None)?;
            let lp = model.ctc_log_probs(&mut g, f.last)?;
            let l = ctc_loss(&mut g, lp, &u.labels).map_err(|e| Error::invalid(format!("utterance `{}`: {e}", u.id)))?;
            let l = g.scale(l, scale);
            let v = g.value(l).item();
            let gr = if want {
                g.backward(l)?;
                let mut gr = Gradients::new(&model.store);
                collect_grads(&g, &mut gr, 1.0);
                Some(gr)
            } else {
                None
            };
            Ok((v, gr))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    if let Some(acc) = grads {
        for (v, gr) in &parts {
            total += v;
            let gr = gr.as_ref().expect("requested");
            for id in model.store.ids() {
                if let Some(x) = gr.get(id) {
                    acc.accumulate(id, x, 1.0);
                }
            }
        }
    } else {
        total = parts.iter().map(|(v, _)| v).sum();
    }
    Ok(total)
}

/// Attaches a CTC head (if missing) and trains it, with the encoder frozen
/// for the first `freeze_encoder_steps` and the feature extractor optionally
/// frozen throughout.
pub fn ctc_finetune(
    model: &mut SslModel,
    data: &[LabeledUtterance],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning set is empty"));
    }
    match model.ctc_head().map(|h| model.store.value(h.w).shape()[1]) {
        None => model.add_ctc_head(vocab.classes())?,
        Some(c) if c != vocab.classes() => {
            return Err(Error::Config(format!(
                "existing CTC head has {c} classes, the vocabulary needs {}",
                vocab.classes()
            )))
        }
        Some(_) => {}
    }
    let extractor = model.feature_extractor_param_ids();
    let encoder: Vec<(ParamId, bool, bool)> = model
        .encoder_param_ids()
        .into_iter()
        .map(|id| (id, model.store.is_trainable(id), extractor.contains(&id)))
        .collect();
    let set_frozen = |model: &mut SslModel, frozen: bool| {
        for &(id, was, in_extractor) in &encoder {
            let frozen = frozen || (in_extractor && cfg.freeze_feature_extractor);
            model.store.set_trainable(id, was && !frozen);
        }
    };
    let restore = |model: &mut SslModel| {
        for &(id, was, _) in &encoder {
            model.store.set_trainable(id, was);
        }
    };
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let seed = derive_seed(cfg.seed, &[tag("finetune")]);
    let mut out = FinetuneOutcome::default();
    for step in 0..cfg.steps {
        set_frozen(model, step < cfg.freeze_encoder_steps);
        let batch: Vec<&LabeledUtterance> = (0..cfg.batch_size)
            .map(|slot| &data[batch_index(seed, step, slot, cfg.batch_size, data.len())])
            .collect();
        let mut grads = Gradients::new(&model.store);
        let loss = ctc_batch_loss(model, &batch, Some(&mut grads))?;
        if !loss.is_finite() {
            restore(model);
            return Err(Error::Diverged {
                step,
                detail: format!("CTC loss {loss}"),
            });
        }
        adam.step(&mut model.store, &grads, cfg.lr_at(step));
        if (step + 1) % 100 == 0 {
            log::info!("fine-tune step {}/{} loss {:.4}", step + 1, cfg.steps, loss);
        }
        out.losses.push(loss);
    }
    restore(model);
    Ok(out)
}
