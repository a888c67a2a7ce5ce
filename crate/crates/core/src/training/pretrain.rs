use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BaselineInput, FatConfig, Granularity, ImstConfig, PretrainConfig};
use super::prepare::{imst_apply_cached, mix_stream, prepare_with, EnhanceCache};
use crate::audio::{NoiseBank, Waveform};
use crate::encoder::{combine, masked_ce_terms, span_mask, MaskSet, MaskingConfig, Provenance, SslModel};
use crate::error::{Error, Result};
use crate::frontends::{Frontend, FrontendPool};
use crate::numerics::{collect_grads, AdamConfig, AdamState, Gradients, Graph};
use crate::rng::{self, derive_seed, tag};

/// One clean training utterance with its frame-level cluster targets.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub clean: Waveform,
    pub targets: Vec<u32>,
}

pub struct PretrainData<'a> {
    pub utterances: &'a [Utterance],
    pub noise: Option<&'a NoiseBank>,
    /// Hash of the manifest the utterances came from, for provenance.
    pub manifest_hash: String,
}

/// What each training presentation is built from.
#[derive(Clone, Copy)]
pub enum Regime<'a> {
    Baseline {
        input: BaselineInput,
        snr_range: [f64; 2],
    },
    Fat {
        fat: &'a FatConfig,
        pool: &'a FrontendPool,
        imst: Option<&'a ImstConfig>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_frames: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub slot: usize,
    pub index: usize,
    pub utt_id: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frontend: Option<String>,
    /// Per-segment front-end ids of the mixed-style input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imst: Option<Vec<Option<String>>>,
    pub masked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepProvenance {
    pub step: usize,
    pub seed: u64,
    pub manifest_hash: String,
    pub items: Vec<ItemRecord>,
}

/// Where and how a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub dir: PathBuf,
    pub system: String,
    pub codebook: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOutcome {
    pub log: Vec<LossRecord>,
    pub provenance: Vec<StepProvenance>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_updates: u64,
}

impl PretrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Model inputs of one presentation.
struct Item {
    index: usize,
    main: Waveform,
    aux: Option<Waveform>,
    mask: MaskSet,
    masked: usize,
    record: ItemRecord,
}

/// Utterance index at batch position `slot` of `step`. Every epoch is a
/// fresh seeded permutation, so any step can be rebuilt on its own.
pub fn batch_index(seed: u64, step: usize, slot: usize, batch_size: usize, n: usize) -> usize {
    let pos = step * batch_size + slot;
    let epoch = pos / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[tag("epoch"), epoch as u64]));
    perm[pos % n]
}

fn presentation_seed(seed: u64, step: usize, slot: usize) -> u64 {
    derive_seed(seed, &[tag("present"), step as u64, slot as u64])
}

#[allow(clippy::too_many_arguments)]
fn build_item(
    model: &SslModel,
    data: &PretrainData,
    regime: &Regime,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    step: usize,
    slot: usize,
    batch_fe: Option<&Arc<Frontend>>,
) -> Result<Item> {
    let n = data.utterances.len();
    let index = batch_index(cfg.seed, step, slot, cfg.batch_size, n);
    let utt = &data.utterances[index];
    let pseed = presentation_seed(cfg.seed, step, slot);
    let noise = || {
        data.noise
            .ok_or_else(|| Error::invalid("noisy pretraining needs a noise bank"))
    };
    let mut record = ItemRecord {
        slot,
        index,
        utt_id: utt.id.clone(),
        seed: pseed,
        snr_db: None,
        noise_id: None,
        noise_offset: None,
        frontend: None,
        imst: None,
        masked: 0,
    };
    let (main, aux) = match regime {
        Regime::Baseline {
            input: BaselineInput::Clean,
            ..
        } => (utt.clean.clone(), None),
        Regime::Baseline {
            input: BaselineInput::Noisy,
            snr_range,
        } => {
            let (noisy, mix) = noise()?.mix(&utt.clean, *snr_range, &mut mix_stream(pseed))?;
            record.snr_db = Some(mix.snr_db);
            record.noise_id = Some(mix.noise_id);
            record.noise_offset = Some(mix.noise_offset);
            (noisy, None)
        }
        Regime::Fat { fat, pool, imst } => {
            let fe = match batch_fe {
                Some(f) => f.clone(),
                None => pool.sample(&mut rng::stream(pseed, &[tag("frontend")]))?.clone(),
            };
            let prep = prepare_with(&utt.clean, noise()?, fat, pseed, &fe)?;
            record.snr_db = Some(prep.record.snr_db);
            record.noise_id = Some(prep.record.noise_id.clone());
            record.noise_offset = Some(prep.record.noise_offset);
            record.frontend = prep.record.frontend.clone();
            let branch_in = match imst {
                Some(ic) => {
                    let mut cache = EnhanceCache::new();
                    cache.insert(fe.id(), prep.enh.clone());
                    let mut r = rng::stream(pseed, &[tag("imst")]);
                    let (mixed, styles) = imst_apply_cached(&prep.noisy, pool, ic, &mut r, &mut cache)?;
                    record.imst = Some(styles);
                    mixed
                }
                None => prep.noisy.clone(),
            };
            match model.fusion {
                Some(_) => (prep.enh, Some(branch_in)),
                // Without fusion IMST output is the only input; FAT alone
                // feeds the enhanced audio.
                None if imst.is_some() => (branch_in, None),
                None => (prep.enh, None),
            }
        }
    };
    let frames = model.frames(main.len())?;
    let mask = span_mask(frames, masking, &mut rng::stream(pseed, &[tag("mask")]));
    let usable = frames.min(utt.targets.len());
    let masked = mask.indices().iter().filter(|&&i| i < usable).count();
    record.masked = masked;
    Ok(Item {
        index,
        main,
        aux,
        mask,
        masked,
        record,
    })
}

fn build_batch(
    model: &SslModel,
    data: &PretrainData,
    regime: &Regime,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    step: usize,
) -> Result<Vec<Item>> {
    let batch_fe = match regime {
        Regime::Fat { fat, pool, .. } if fat.granularity == Granularity::PerBatch => Some(
            pool.sample(&mut rng::stream(cfg.seed, &[tag("batch-frontend"), step as u64]))?
                .clone(),
        ),
        _ => None,
    };
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|slot| build_item(model, data, regime, masking, cfg, step, slot, batch_fe.as_ref()))
        .collect()
}

/// Loss of one item, normalised by the batch totals, and its gradients.
fn item_loss(
    model: &SslModel,
    item: &Item,
    targets: &[u32],
    masking: &MaskingConfig,
    totals: (usize, usize),
    grads: Option<&mut Gradients>,
) -> Result<(f64, usize)> {
    let mut g = if grads.is_some() { Graph::new() } else { Graph::inference() };
    let fwd = match &item.aux {
        Some(aux) => model.forward_two_branch(&mut g, item.main.samples(), aux.samples(), Some(&item.mask))?,
        None => model.forward_single(&mut g, item.main.samples(), Some(&item.mask))?,
    };
    let w = masking.unmasked_weight;
    let terms = masked_ce_terms(&mut g, fwd.logits, targets, &item.mask, w > 0.0)?;
    let loss = combine(&mut g, &terms, totals.0, totals.1, w)?;
    let value = g.value(loss).item();
    if let Some(gr) = grads {
        if value.is_finite() {
            g.backward(loss)?;
            collect_grads(&g, gr, 1.0);
        }
    }
    Ok((value, terms.unmasked))
}

fn unmasked_total(model: &SslModel, items: &[Item], data: &PretrainData) -> Result<usize> {
    let mut u = 0;
    for it in items {
        let frames = model.frames(it.main.len())?;
        let usable = frames.min(data.utterances[it.index].targets.len());
        u += usable - it.masked;
    }
    Ok(u)
}

/// Batch loss and summed gradients for `step` at the current weights.
fn step_loss(
    model: &SslModel,
    data: &PretrainData,
    regime: &Regime,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    step: usize,
    with_grads: bool,
) -> Result<(f64, usize, Option<Gradients>, StepProvenance)> {
    let items = build_batch(model, data, regime, masking, cfg, step)?;
    let masked: usize = items.iter().map(|i| i.masked).sum();
    if masked == 0 {
        return Err(Error::invalid(format!("step {step}: batch has no masked frames")));
    }
    let totals = (masked, unmasked_total(model, &items, data)?);
    let per_item: Vec<(f64, Option<Gradients>)> = items
        .par_iter()
        .map(|it| {
            let targets = &data.utterances[it.index].targets;
            let mut gr = with_grads.then(|| Gradients::new(&model.store));
            let (v, _) = item_loss(model, it, targets, masking, totals, gr.as_mut())?;
            Ok((v, gr))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total = with_grads.then(|| Gradients::new(&model.store));
    for (v, gr) in &per_item {
        loss += v;
        if let (Some(t), Some(gr)) = (total.as_mut(), gr) {
            for id in model.store.ids() {
                if let Some(x) = gr.get(id) {
                    t.accumulate(id, x, 1.0);
                }
            }
        }
    }
    let prov = StepProvenance {
        step,
        seed: cfg.seed,
        manifest_hash: data.manifest_hash.clone(),
        items: items.into_iter().map(|i| i.record).collect(),
    };
    Ok((loss, masked, total, prov))
}

/// Recomputes the loss of `step` from the model state before that step.
pub fn replay_step(
    model: &SslModel,
    data: &PretrainData,
    regime: &Regime,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    step: usize,
) -> Result<f64> {
    step_loss(model, data, regime, masking, cfg, step, false).map(|(l, ..)| l)
}

struct Sinks {
    out: PretrainOutput,
    loss_csv: fs::File,
    provenance: fs::File,
}

impl Sinks {
    fn open(out: &PretrainOutput) -> Result<Self> {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let open = |name: &str| {
            let p = out.dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        let mut loss_csv = open("loss.csv")?;
        writeln!(loss_csv, "step,loss,masked_frames,lr").map_err(|e| Error::io(out.dir.join("loss.csv"), e))?;
        Ok(Self {
            out: out.clone(),
            loss_csv,
            provenance: open("provenance.jsonl")?,
        })
    }

    fn write(&mut self, rec: &LossRecord, prov: &StepProvenance) -> Result<()> {
        writeln!(
            self.loss_csv,
            "{},{:e},{},{:e}",
            rec.step, rec.loss, rec.masked_frames, rec.lr
        )
        .map_err(|e| Error::io(self.out.dir.join("loss.csv"), e))?;
        writeln!(self.provenance, "{}", serde_json::to_string(prov)?)
            .map_err(|e| Error::io(self.out.dir.join("provenance.jsonl"), e))
    }

    fn checkpoint(
        &self,
        model: &SslModel,
        masking: &MaskingConfig,
        cfg: &PretrainConfig,
        steps: usize,
        name: &str,
        hash: &str,
    ) -> Result<PathBuf> {
        let prov = Provenance {
            seed: cfg.seed,
            steps,
            manifest_hash: Some(hash.to_string()),
            system: Some(self.out.system.clone()),
        };
        model.save(&self.out.dir.join(name), masking, self.out.codebook.clone(), prov, None)
    }
}

/// Shared loop behind [`pretrain`] and [`baseline_pretrain`].
pub fn run_pretraining(
    model: &mut SslModel,
    data: &PretrainData,
    regime: &Regime,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    out: Option<&PretrainOutput>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    masking.validate()?;
    if data.utterances.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if let Regime::Fat { fat, imst, .. } = regime {
        fat.validate()?;
        if let Some(i) = imst {
            i.validate()?;
        }
    }
    let mut sinks = out.map(Sinks::open).transpose()?;
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut outcome = PretrainOutcome::default();
    for step in 0..cfg.steps {
        let (loss, masked, grads, prov) = step_loss(model, data, regime, masking, cfg, step, true)?;
        if !loss.is_finite() {
            let detail = format!(
                "loss {loss} with batch {:?}",
                prov.items.iter().map(|i| &i.utt_id).collect::<Vec<_>>()
            );
            if let Some(s) = &sinks {
                let dump = s.out.dir.join(format!("diverged_step{step:06}.json"));
                fs::write(&dump, serde_json::to_string_pretty(&prov)?).map_err(|e| Error::io(&dump, e))?;
            }
            return Err(Error::Diverged { step, detail });
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model.store, grads.as_ref().expect("requested"), lr);
        let rec = LossRecord {
            step,
            loss,
            masked_frames: masked,
            lr,
        };
        if let Some(s) = sinks.as_mut() {
            s.write(&rec, &prov)?;
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let p = s.checkpoint(
                    model,
                    masking,
                    cfg,
                    step + 1,
                    &format!("step{:06}", step + 1),
                    &data.manifest_hash,
                )?;
                outcome.checkpoints.push(p);
            }
        }
        if (step + 1) % 100 == 0 {
            log::info!("step {}/{} loss {:.4}", step + 1, cfg.steps, loss);
        }
        outcome.log.push(rec);
        outcome.provenance.push(prov);
    }
    if let Some(s) = &sinks {
        outcome
            .checkpoints
            .push(s.checkpoint(model, masking, cfg, cfg.steps, "final", &data.manifest_hash)?);
    }
    outcome.skipped_updates = adam.skipped();
    Ok(outcome)
}

/// Continual pretraining with FAT (and optionally IMST) on the model's
/// fusion configuration.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &mut SslModel,
    data: &PretrainData,
    fat: &FatConfig,
    pool: &FrontendPool,
    imst: Option<&ImstConfig>,
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    out: Option<&PretrainOutput>,
) -> Result<PretrainOutcome> {
    run_pretraining(model, data, &Regime::Fat { fat, pool, imst }, masking, cfg, out)
}

/// Single-branch pretraining on clean or plainly noisy audio.
pub fn baseline_pretrain(
    model: &mut SslModel,
    data: &PretrainData,
    input: BaselineInput,
    snr_range: [f64; 2],
    masking: &MaskingConfig,
    cfg: &PretrainConfig,
    out: Option<&PretrainOutput>,
) -> Result<PretrainOutcome> {
    run_pretraining(model, data, &Regime::Baseline { input, snr_range }, masking, cfg, out)
}

/// Reads a loss CSV written by a pretraining run.
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::invalid(format!("{}: malformed loss row `{l}`", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad(l))?,
                loss: f[1].parse().map_err(|_| bad(l))?,
                masked_frames: f[2].parse().map_err(|_| bad(l))?,
                lr: f[3].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}
