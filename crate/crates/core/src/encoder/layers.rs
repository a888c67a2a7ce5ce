//! Attention, transformer blocks, and the layer-wise fusion modules.

use rand::Rng;

use super::config::{EncoderConfig, FusionVariant};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Query/key/value/output projections of one attention module.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    /// Random projections; the output projection is zero when `zero_output`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, zero_output: bool, rng: &mut impl Rng) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, true, rng);
        let k = Linear::new(store, &format!("{name}.k"), dim, dim, true, rng);
        let v = Linear::new(store, &format!("{name}.v"), dim, dim, true, rng);
        let o = if zero_output {
            Linear::zeros(store, &format!("{name}.o"), dim, dim, true)
        } else {
            Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)
        };
        Self { q, k, v, o, heads }
    }

    /// Attention of `query` (`[t, d]`) over `context` (`[s, d]`). Returns the
    /// projected output and each head's `[t, s]` attention weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let dim = g.shape(query)[1];
        let dh = dim / self.heads;
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            weights.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.o.forward(g, store, cat)?, weights))
    }
}

/// Pre-norm transformer block: `h + attn(ln(h))`, then `h + ffn(ln(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.num_heads, false, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn_dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        self.forward_traced(g, store, h).map(|(v, _)| v)
    }

    /// Like `forward`, also returning the self-attention weights.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Vec<Var>)> {
        let x = self.ln1.forward(g, store, h)?;
        let (a, w) = self.attn.forward(g, store, x, x)?;
        let h = g.add(h, a)?;
        let x = self.ln2.forward(g, store, h)?;
        let x = self.ff1.forward(g, store, x)?;
        let x = g.gelu(x);
        let x = self.ff2.forward(g, store, x)?;
        Ok((g.add(h, x)?, w))
    }
}

/// Parameters of one fusion site.
#[derive(Clone, Debug)]
pub enum FusionSite {
    /// `main + α·aux`, α starts at 0.
    Oa { alpha: ParamId },
    /// `g⊙main + (1−g)⊙aux`, `g = σ([main; aux] W + b)`, W and b start at 0.
    Sf { gate: Linear },
    /// `main + CrossAttn(q = main, kv = aux)`, output projection starts at 0.
    Da { attn: Attention },
}

impl FusionSite {
    pub fn new(store: &mut ParamStore, variant: FusionVariant, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        match variant {
            FusionVariant::Oa => FusionSite::Oa {
                alpha: store.add(format!("{name}.alpha"), Tensor::zeros(&[1])),
            },
            FusionVariant::Sf => FusionSite::Sf {
                gate: Linear::zeros(store, &format!("{name}.gate"), 2 * dim, dim, true),
            },
            FusionVariant::Da => FusionSite::Da {
                attn: Attention::new(store, name, dim, heads, true, rng),
            },
        }
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionSite::Oa { .. } => FusionVariant::Oa,
            FusionSite::Sf { .. } => FusionVariant::Sf,
            FusionSite::Da { .. } => FusionVariant::Da,
        }
    }

    /// Fused main-branch states.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, main: Var, aux: Var) -> Result<Var> {
        if g.shape(main) != g.shape(aux) {
            return Err(Error::Shape(format!(
                "fuse: main {:?} and aux {:?} differ",
                g.shape(main),
                g.shape(aux)
            )));
        }
        match self {
            FusionSite::Oa { alpha } => {
                let a = g.param(store, *alpha);
                let scaled = g.mul(aux, a)?;
                g.add(main, scaled)
            }
            FusionSite::Sf { gate } => {
                let both = g.concat(&[main, aux], 1)?;
                let z = gate.forward(g, store, both)?;
                let gt = g.sigmoid(z);
                let diff = g.sub(main, aux)?;
                let gd = g.mul(gt, diff)?;
                g.add(aux, gd)
            }
            FusionSite::Da { attn } => {
                let (a, _) = attn.forward(g, store, main, aux)?;
                g.add(main, a)
            }
        }
    }
}
