//! Parameterized layers shared by the enhancers and the encoder. Each layer
//! only holds [`ParamId`]s; values live in the caller's [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{fan_in_uniform, truncated_normal, Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::with_weight(store, name, truncated_normal(rng, &[d_in, d_out], INIT_STD), bias)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[d_in, d_out]), bias)
    }

    /// Uniform `±1/sqrt(d_in)` weights, for layers whose output feeds a
    /// nonlinearity directly and needs unit-scale activations.
    pub fn fan_in(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::with_weight(store, name, fan_in_uniform(rng, &[d_in, d_out], d_in), bias)
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Self {
        let d_out = w.shape()[1];
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

/// 1-D convolution on `[time, channels]` input.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[c_out, c_in, kernel], c_in * kernel),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            w,
            b,
            stride,
            padding,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv1d(x, w, self.stride, self.padding, self.dilation)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Single-layer GRU over `[time, d_in]`, returning `[time, hidden]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::fan_in(store, &format!("{name}.input"), d_in, 3 * hidden, true, rng),
            recurrent: Linear::fan_in(store, &format!("{name}.recurrent"), hidden, 3 * hidden, false, rng),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let h_dim = self.hidden;
        let xs = self.input.forward(g, store, x)?;
        let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.slice(xs, 0, step, 1)?;
            let hu = self.recurrent.forward(g, store, h)?;
            let x_zr = g.slice(xt, 1, 0, 2 * h_dim)?;
            let h_zr = g.slice(hu, 1, 0, 2 * h_dim)?;
            let zr = g.add(x_zr, h_zr)?;
            let zr = g.sigmoid(zr);
            let z = g.slice(zr, 1, 0, h_dim)?;
            let r = g.slice(zr, 1, h_dim, h_dim)?;
            let x_n = g.slice(xt, 1, 2 * h_dim, h_dim)?;
            let h_n = g.slice(hu, 1, 2 * h_dim, h_dim)?;
            let rh = g.mul(r, h_n)?;
            let n = g.add(x_n, rh)?;
            let n = g.tanh(n);
            // h = n + z * (h - n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
            outs.push(h);
        }
        g.concat(&outs, 0)
    }
}
