//! Learned-filterbank masking enhancer: a strided conv encoder, a stack of
//! dilated residual conv blocks predicting a sigmoid mask over the encoder
//! channels, and a transposed-conv decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear};
use crate::numerics::{fan_in_uniform, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeDomainHyper {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bottleneck: usize,
    pub blocks: usize,
}

impl Default for TimeDomainHyper {
    fn default() -> Self {
        Self {
            filters: 64,
            kernel: 16,
            stride: 8,
            bottleneck: 32,
            blocks: 4,
        }
    }
}

impl TimeDomainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel < self.stride || self.filters == 0 || self.bottleneck == 0 {
            return Err(Error::Config(format!(
                "invalid time-domain front-end hyperparameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TimeDomainEnhancer {
    pub hyper: TimeDomainHyper,
    encoder: ParamId,
    norm: LayerNorm,
    bottleneck: Linear,
    blocks: Vec<Conv1d>,
    mask: Linear,
    decoder: ParamId,
}

impl TimeDomainEnhancer {
    pub fn new(store: &mut ParamStore, hyper: TimeDomainHyper, rng: &mut impl Rng) -> Result<Self> {
        hyper.validate()?;
        let (n, k, b) = (hyper.filters, hyper.kernel, hyper.bottleneck);
        let encoder = store.add("td.encoder.weight", fan_in_uniform(rng, &[n, 1, k], k));
        let norm = LayerNorm::new(store, "td.norm", n);
        let bottleneck = Linear::fan_in(store, "td.bottleneck", n, b, true, rng);
        let blocks = (0..hyper.blocks)
            .map(|i| {
                let d = 1 << i;
                Conv1d::new(store, &format!("td.block{i}"), b, b, 3, 1, d, d, true, rng)
            })
            .collect();
        let mask = Linear::fan_in(store, "td.mask", b, n, true, rng);
        let decoder = store.add("td.decoder.weight", fan_in_uniform(rng, &[n, 1, k], n));
        Ok(Self {
            hyper,
            encoder,
            norm,
            bottleneck,
            blocks,
            mask,
            decoder,
        })
    }

    /// Left and right zero padding so that the strided encoder tiles the
    /// input exactly and the decoder output can be trimmed back.
    fn padding(&self, len: usize) -> (usize, usize) {
        let (k, s) = (self.hyper.kernel, self.hyper.stride);
        let left = k - s;
        let frames = (left + len).saturating_sub(k).div_ceil(s) + 1;
        let total = (frames - 1) * s + k;
        (left, total - left - len)
    }

    /// Enhanced signal `[len, 1]` for the samples `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &[f64]) -> Result<Var> {
        let (left, right) = self.padding(x.len());
        let mut padded = vec![0.0; left];
        padded.extend_from_slice(x);
        padded.resize(left + x.len() + right, 0.0);
        let lp = padded.len();
        let input = g.constant(Tensor::new(vec![lp, 1], padded)?);
        let enc_w = g.param(store, self.encoder);
        let w = g.conv1d(input, enc_w, self.hyper.stride, 0, 1)?;
        let w = g.relu(w);
        let h = self.norm.forward(g, store, w)?;
        let mut h = self.bottleneck.forward(g, store, h)?;
        for block in &self.blocks {
            let y = block.forward(g, store, h)?;
            let y = g.relu(y);
            h = g.add(h, y)?;
        }
        let m = self.mask.forward(g, store, h)?;
        let m = g.sigmoid(m);
        let masked = g.mul(w, m)?;
        let dec_w = g.param(store, self.decoder);
        let y = g.conv_transpose1d(masked, dec_w, self.hyper.stride, 0)?;
        g.slice(y, 0, left, x.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_length_matches_input() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = TimeDomainEnhancer::new(&mut store, TimeDomainHyper::default(), &mut rng).unwrap();
        for len in [1, 7, 8, 9, 100, 333] {
            let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.3).sin()).collect();
            let mut g = Graph::inference();
            let y = m.forward(&mut g, &store, &x).unwrap();
            assert_eq!(g.shape(y), &[len, 1]);
        }
    }
}
