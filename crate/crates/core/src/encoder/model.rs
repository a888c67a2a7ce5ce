use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, FusionConfig, MaskingConfig};
use super::layers::{Block, FusionSite};
use super::mask::MaskSet;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear, INIT_STD};
use crate::numerics::checkpoint::{load_params, save_params};
use crate::numerics::{truncated_normal, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::targets::FeatureSequence;

/// Inputs and output of one fusion site during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiteTrace {
    pub block: usize,
    pub main_in: Var,
    pub aux: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub frames: usize,
    /// Main-branch states after each block (after fusion where it applies).
    pub hidden: Vec<Var>,
    /// Final layer-normed main-branch states.
    pub last: Var,
    /// `[frames, k]` masked-prediction logits.
    pub logits: Var,
    pub sites: Vec<SiteTrace>,
}

/// Where a model came from; stored in the checkpoint sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub steps: usize,
    pub manifest_hash: Option<String>,
    pub system: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub encoder: EncoderConfig,
    pub fusion: Option<FusionConfig>,
    pub masking: MaskingConfig,
    pub codebook: Option<String>,
    pub provenance: Provenance,
    pub init_seed: u64,
    /// CTC output symbols (blank excluded) once a head is attached.
    pub ctc_vocab: Option<Vec<String>>,
}

/// Two-branch masked-prediction encoder. Both branches share every weight;
/// fusion sites feed the auxiliary branch into the main one.
#[derive(Clone, Debug)]
pub struct SslModel {
    pub config: EncoderConfig,
    pub fusion: Option<FusionConfig>,
    pub store: ParamStore,
    pub init_seed: u64,
    conv: Vec<(Conv1d, LayerNorm)>,
    proj_norm: LayerNorm,
    proj: Linear,
    mask_emb: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    sites: Vec<(usize, FusionSite)>,
    ctc_head: Option<Linear>,
}

impl SslModel {
    /// Base weights come from one seeded stream and fusion weights from
    /// another, so adding fusion never changes the base initialisation.
    pub fn new(config: EncoderConfig, fusion: Option<FusionConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::tag("encoder-init")]);
        let c = config.conv_channels;
        let d = config.model_dim;
        let mut c_in = 1;
        let conv = config
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let conv = Conv1d::new(
                    &mut store,
                    &format!("conv{i}"),
                    c_in,
                    c,
                    l.kernel,
                    l.stride,
                    0,
                    1,
                    false,
                    &mut r,
                );
                let norm = LayerNorm::new(&mut store, &format!("conv{i}.norm"), c);
                c_in = c;
                (conv, norm)
            })
            .collect();
        let proj_norm = LayerNorm::new(&mut store, "proj.norm", c);
        let proj = Linear::new(&mut store, "proj", c, d, true, &mut r);
        let mask_emb = store.add("mask_emb", truncated_normal(&mut r, &[d], INIT_STD));
        let pos = store.add("pos_emb", truncated_normal(&mut r, &[config.max_frames, d], INIT_STD));
        let blocks = (0..config.num_blocks)
            .map(|i| Block::new(&mut store, &format!("block{i}"), &config, &mut r))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "final.norm", d);
        let head = Linear::new(&mut store, "head", d, config.k, true, &mut r);
        let mut fr = rng::stream(seed, &[rng::tag("fusion-init")]);
        let sites = fusion
            .map(|f| {
                f.sites(config.num_blocks)
                    .into_iter()
                    .map(|b| {
                        let site = FusionSite::new(&mut store, f.variant, &format!("fusion.{b}"), d, config.num_heads, &mut fr);
                        (b, site)
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            config,
            fusion,
            store,
            init_seed: seed,
            conv,
            proj_norm,
            proj,
            mask_emb,
            pos,
            blocks,
            final_norm,
            head,
            sites,
            ctc_head: None,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Scalars belonging to fusion sites.
    pub fn fusion_param_count(&self) -> usize {
        self.store.num_scalars_with_prefix("fusion.")
    }

    /// Ids of all fusion parameters (e.g. to freeze them).
    pub fn fusion_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("fusion."))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn frames(&self, samples: usize) -> Result<usize> {
        self.config.frames(samples).ok_or_else(|| {
            Error::invalid(format!(
                "input of {samples} samples is shorter than the {}-sample receptive field",
                self.config.receptive_field()
            ))
        })
    }

    /// Conv features projected to the model width, `[frames, model_dim]`.
    pub fn conv_extract(&self, g: &mut Graph, x: &[f64]) -> Result<Var> {
        let t = self.frames(x.len())?;
        if t > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{t} frames exceed the positional table of {}",
                self.config.max_frames
            )));
        }
        let mut h = g.constant(Tensor::new(vec![x.len(), 1], x.to_vec())?);
        for (conv, norm) in &self.conv {
            h = conv.forward(g, &self.store, h)?;
            h = norm.forward(g, &self.store, h)?;
            h = g.gelu(h);
        }
        let h = self.proj_norm.forward(g, &self.store, h)?;
        self.proj.forward(g, &self.store, h)
    }

    fn add_positions(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let t = g.shape(h)[0];
        let table = g.param(&self.store, self.pos);
        let p = g.slice(table, 0, 0, t)?;
        g.add(h, p)
    }

    fn apply_mask(&self, g: &mut Graph, h: Var, mask: &MaskSet) -> Result<Var> {
        let t = g.shape(h)[0];
        if mask.frames != t {
            return Err(Error::Shape(format!(
                "mask over {} frames for {t} encoder frames",
                mask.frames
            )));
        }
        if mask.is_empty() {
            return Ok(h);
        }
        let ind = mask.indicator();
        let keep: Vec<f64> = ind.iter().map(|m| 1.0 - m).collect();
        let keep = g.constant(Tensor::new(vec![t, 1], keep)?);
        let ind = g.constant(Tensor::new(vec![t, 1], ind)?);
        let emb = g.param(&self.store, self.mask_emb);
        let kept = g.mul(h, keep)?;
        let fill = g.mul(ind, emb)?;
        g.add(kept, fill)
    }

    /// Runs the shared encoder on the enhanced (main) and noisy (aux)
    /// renderings of one utterance. Masking applies to the main branch only.
    /// Without fusion the aux input is ignored.
    pub fn forward_two_branch(&self, g: &mut Graph, enh: &[f64], noisy: &[f64], mask: Option<&MaskSet>) -> Result<Forward> {
        if !self.sites.is_empty() && enh.len() != noisy.len() {
            return Err(Error::Shape(format!(
                "branch lengths differ: enhanced {} vs noisy {} samples",
                enh.len(),
                noisy.len()
            )));
        }
        let feat = self.conv_extract(g, enh)?;
        let frames = g.shape(feat)[0];
        let mut main = match mask {
            Some(m) => self.apply_mask(g, feat, m)?,
            None => feat,
        };
        main = self.add_positions(g, main)?;
        let last_site = self.sites.iter().map(|(b, _)| *b).max();
        let mut aux = match last_site {
            Some(_) => {
                let f = if enh == noisy { feat } else { self.conv_extract(g, noisy)? };
                Some(self.add_positions(g, f)?)
            }
            None => None,
        };
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::new();
        let mut site_iter = self.sites.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            main = block.forward(g, &self.store, main)?;
            if let Some(a) = aux {
                aux = if last_site.is_some_and(|l| i <= l) {
                    Some(block.forward(g, &self.store, a)?)
                } else {
                    None
                };
            }
            if let Some((_, site)) = site_iter.next_if(|(b, _)| *b == i) {
                let a = aux.expect("aux branch runs up to the last site");
                let out = site.fuse(g, &self.store, main, a)?;
                traces.push(SiteTrace {
                    block: i,
                    main_in: main,
                    aux: a,
                    out,
                });
                main = out;
            }
            hidden.push(main);
        }
        let last = self.final_norm.forward(g, &self.store, main)?;
        let logits = self.head.forward(g, &self.store, last)?;
        Ok(Forward {
            frames,
            hidden,
            last,
            logits,
            sites: traces,
        })
    }

    /// Single-branch forward that skips every fusion site.
    pub fn forward_single(&self, g: &mut Graph, x: &[f64], mask: Option<&MaskSet>) -> Result<Forward> {
        let feat = self.conv_extract(g, x)?;
        let frames = g.shape(feat)[0];
        let mut h = match mask {
            Some(m) => self.apply_mask(g, feat, m)?,
            None => feat,
        };
        h = self.add_positions(g, h)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, &self.store, h)?;
            hidden.push(h);
        }
        let last = self.final_norm.forward(g, &self.store, h)?;
        let logits = self.head.forward(g, &self.store, last)?;
        Ok(Forward {
            frames,
            hidden,
            last,
            logits,
            sites: Vec::new(),
        })
    }

    /// Hidden states after block `layer` with no masking and the same
    /// waveform on both branches.
    pub fn extract_layer(&self, x: &[f64], layer: usize) -> Result<FeatureSequence> {
        if layer >= self.blocks.len() {
            return Err(Error::invalid(format!(
                "layer index {layer} out of range for a {}-block model",
                self.blocks.len()
            )));
        }
        let mut g = Graph::inference();
        let f = self.forward_two_branch(&mut g, x, x, None)?;
        let v = g.value(f.hidden[layer]);
        let frame_rate = self.config.sample_rate as f64 / self.config.downsample() as f64;
        FeatureSequence::new(f.frames, self.config.model_dim, v.data().to_vec(), frame_rate)
    }

    // ------------------------------------------------------------------ CTC

    /// Attaches a zero-initialised linear CTC head with `outputs` classes
    /// (blank included).
    pub fn add_ctc_head(&mut self, outputs: usize) -> Result<()> {
        if self.ctc_head.is_some() {
            return Err(Error::invalid("model already has a CTC head"));
        }
        self.ctc_head = Some(Linear::zeros(
            &mut self.store,
            "ctc.head",
            self.config.model_dim,
            outputs,
            true,
        ));
        Ok(())
    }

    pub fn ctc_head(&self) -> Option<&Linear> {
        self.ctc_head.as_ref()
    }

    /// `[frames, outputs]` CTC log-probabilities from final main states.
    pub fn ctc_log_probs(&self, g: &mut Graph, last: Var) -> Result<Var> {
        let head = self
            .ctc_head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no CTC head"))?;
        let z = head.forward(g, &self.store, last)?;
        Ok(g.log_softmax(z))
    }

    /// Ids of parameters that belong to the encoder proper (everything
    /// except the CTC head).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("ctc."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Ids of the convolutional feature extractor's parameters.
    pub fn feature_extractor_param_ids(&self) -> Vec<ParamId> {
        self.conv
            .iter()
            .flat_map(|(c, n)| [Some(c.w), c.b, Some(n.gain), Some(n.shift)])
            .flatten()
            .collect()
    }

    /// Copies every parameter of `base` into the same-named parameter here.
    /// Parameters only this model has (fusion, CTC head) keep their values.
    pub fn inherit(&mut self, base: &SslModel) -> Result<usize> {
        if base.config != self.config {
            return Err(Error::Config("inherit: encoder configurations differ".into()));
        }
        let mut copied = 0;
        for (_, p) in base.store.iter() {
            if p.name.starts_with("ctc.") {
                continue;
            }
            let id = self
                .store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("inherit: parameter `{}` missing", p.name)))?;
            if self.store.value(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("inherit: shape mismatch for `{}`", p.name)));
            }
            *self.store.value_mut(id) = p.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    // ----------------------------------------------------------- checkpoint

    /// Writes `<stem>.fatl` plus `<stem>.json`.
    pub fn save(
        &self,
        stem: &Path,
        masking: &MaskingConfig,
        codebook: Option<String>,
        provenance: Provenance,
        ctc_vocab: Option<Vec<String>>,
    ) -> Result<PathBuf> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let ckpt = stem.with_extension("fatl");
        save_params(&self.store, &ckpt)?;
        let side = ModelSidecar {
            encoder: self.config.clone(),
            fusion: self.fusion,
            masking: masking.clone(),
            codebook,
            provenance,
            init_seed: self.init_seed,
            ctc_vocab,
        };
        let json = stem.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&json, e))?;
        Ok(ckpt)
    }

    pub fn load(stem: &Path) -> Result<(Self, ModelSidecar)> {
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: ModelSidecar = serde_json::from_str(&text)?;
        let mut model = SslModel::new(side.encoder.clone(), side.fusion, side.init_seed)?;
        if let Some(v) = &side.ctc_vocab {
            model.add_ctc_head(v.len() + 1)?;
        }
        load_params(&mut model.store, &stem.with_extension("fatl"))?;
        Ok((model, side))
    }
}
