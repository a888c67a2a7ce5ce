//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted; `backward` walks it once in reverse.
//! Parameters live outside the graph in a [`ParamStore`] and enter it as
//! leaves through [`Graph::param`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_nt, gemm_tn, transpose2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// Keeps `tanh` of the inner polynomial for the backward pass.
    Gelu {
        input: Var,
        tanh: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        rstd: Vec<f64>,
    },
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        input: Var,
        idx: Vec<usize>,
    },
    Conv1d(Box<ConvInfo>),
    ConvTranspose1d(Box<ConvInfo>),
    ScalarFn {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct ConvInfo {
    input: Var,
    weight: Var,
    stride: usize,
    padding: usize,
    dilation: usize,
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    t_out: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

/// One forward computation plus the tape needed to differentiate it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records gradients (inference).
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
            retain: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a stored parameter as a leaf; repeated calls return the same node
    /// so that gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        // Frozen parameters are constants, so backward never descends into
        // parts of a model that only depend on them.
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Makes later `param(_, id)` calls return `v` instead of the stored
    /// value; used to differentiate a model with respect to chosen inputs.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Keep the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Gradients of every parameter that entered this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].grad.as_deref().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape(format!("{name}: cannot broadcast {sa:?} with {sb:?}")))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = map(self.value(a), |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = map(self.value(a), |x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    // ----------------------------------------------------------------- shape

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self
            .value(a)
            .dims2()
            .map_err(|_| Error::Shape(format!("transpose: expected a matrix, got {:?}", self.shape(a))))?;
        let data = transpose2(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .clone()
            .reshaped(shape)
            .map_err(|_| Error::Shape(format!("reshape: cannot view {:?} as {shape:?}", self.shape(a))))?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat: shape {s:?} does not match {first:?} off axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} on axis {axis} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    // ----------------------------------------------------------- activations

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = row_softmax(self.value(a), false);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = row_softmax(self.value(a), true);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let tanh: Vec<f64> = src.data().iter().map(|&x| gelu_inner(x).tanh()).collect();
        let data = src.data().iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        let tanh = if rg { tanh } else { Vec::new() };
        self.push(t, Op::Gelu { input: a, tanh }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let d = *src.shape().last().unwrap_or(&1);
        let rows = src.numel() / d.max(1);
        let mut data = vec![0.0; src.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &src.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = (v - mean) * rs;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { input: a, rstd }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    // ------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---------------------------------------------------------------- lookups

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!(
                "embedding: id {bad} out of range for table of {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks flat elements of `a` into a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather: index {bad} out of range for {:?}",
                self.shape(a)
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                input: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- convolutions

    /// 1-D convolution on a time-major input `[time, c_in]` with weights
    /// `[c_out, c_in, kernel]`; returns `[time_out, c_out]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (t_in, c_in, c_out, kernel) = match (si.as_slice(), sw.as_slice()) {
            ([t, c], [o, c2, k]) if c == c2 => (*t, *c, *o, *k),
            _ => return Err(Error::Shape(format!("conv1d: input {si:?} incompatible with weight {sw:?}"))),
        };
        if stride == 0 || dilation == 0 {
            return Err(Error::Shape("conv1d: stride and dilation must be positive".into()));
        }
        let span = dilation * (kernel - 1) + 1;
        if t_in + 2 * padding < span {
            return Err(Error::Shape(format!(
                "conv1d: input length {t_in} (padding {padding}) shorter than receptive field {span}"
            )));
        }
        let t_out = (t_in + 2 * padding - span) / stride + 1;
        let info = ConvInfo {
            input,
            weight,
            stride,
            padding,
            dilation,
            t_in,
            c_in,
            c_out,
            kernel,
            t_out,
        };
        let cols = im2col(self.value(input).data(), &info);
        let mut out = vec![0.0; t_out * c_out];
        gemm_nt(&cols, self.value(weight).data(), &mut out, t_out, c_in * kernel, c_out);
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Tensor::new(vec![t_out, c_out], out)?, Op::Conv1d(Box::new(info)), rg))
    }

    /// Transposed 1-D convolution: input `[time, c_in]`, weights
    /// `[c_in, c_out, kernel]`; output length `(time-1)*stride - 2*padding + kernel`.
    pub fn conv_transpose1d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let (t_in, c_in, c_out, kernel) = match (si.as_slice(), sw.as_slice()) {
            ([t, c], [c2, o, k]) if c == c2 => (*t, *c, *o, *k),
            _ => {
                return Err(Error::Shape(format!(
                    "conv_transpose1d: input {si:?} incompatible with weight {sw:?}"
                )))
            }
        };
        let full = (t_in.saturating_sub(1)) * stride + kernel;
        if stride == 0 || t_in == 0 || full <= 2 * padding {
            return Err(Error::Shape(format!(
                "conv_transpose1d: degenerate output for input {si:?}, stride {stride}, padding {padding}"
            )));
        }
        let t_out = full - 2 * padding;
        let info = ConvInfo {
            input,
            weight,
            stride,
            padding,
            dilation: 1,
            t_in,
            c_in,
            c_out,
            kernel,
            t_out,
        };
        let mut y = vec![0.0; t_in * c_out * kernel];
        gemm(
            self.value(input).data(),
            self.value(weight).data(),
            &mut y,
            t_in,
            c_in,
            c_out * kernel,
        );
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_in {
            for k in 0..kernel {
                let pos = (t * stride + k) as isize - padding as isize;
                if pos < 0 || pos as usize >= t_out {
                    continue;
                }
                let orow = &mut out[pos as usize * c_out..(pos as usize + 1) * c_out];
                for (co, o) in orow.iter_mut().enumerate() {
                    *o += y[t * c_out * kernel + co * kernel + k];
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(Tensor::new(vec![t_out, c_out], out)?, Op::ConvTranspose1d(Box::new(info)), rg))
    }

    /// A scalar computed outside the graph whose gradient with respect to
    /// `input` is already known (e.g. a dynamic-programming loss).
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::Shape(format!(
                "scalar_fn: gradient of length {} for input {:?}",
                grad.len(),
                self.shape(input)
            )));
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, rg))
    }

    // --------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss` into every node that requires a
    /// gradient. Leaf gradients accumulate across calls; intermediate
    /// gradients are dropped unless retained.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = (if node.retain { node.grad.clone() } else { node.grad.take() }) else {
                continue;
            };
            backprop(before, node, &g);
        }
        Ok(())
    }

    /// Clears all stored gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn accumulate(nodes: &mut [Node], v: Var, g: &[f64]) {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        None => n.grad = Some(g.to_vec()),
    }
}

/// Sums `g` (shaped `out_shape`) down to `in_shape` along broadcast axes.
fn unbroadcast(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let offs = broadcast_offsets(out_shape, in_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (&o, &gv) in offs.iter().zip(g) {
        out[o] += gv;
    }
    out
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let y = node.value.data();
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape().to_vec(), nodes[b.0].value.shape().to_vec());
            accumulate(nodes, *a, &unbroadcast(g, out_shape, &sa));
            accumulate(nodes, *b, &unbroadcast(g, out_shape, &sb));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape().to_vec(), nodes[b.0].value.shape().to_vec());
            accumulate(nodes, *a, &unbroadcast(g, out_shape, &sa));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, *b, &unbroadcast(&neg, out_shape, &sb));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let sa = nodes[a.0].value.shape().to_vec();
            let sb = nodes[b.0].value.shape().to_vec();
            let oa = broadcast_offsets(out_shape, &sa);
            let ob = broadcast_offsets(out_shape, &sb);
            let va = nodes[a.0].value.data();
            let vb = nodes[b.0].value.data();
            let need_a = nodes[a.0].requires_grad;
            let need_b = nodes[b.0].requires_grad;
            let mut ga = vec![0.0; if need_a { va.len() } else { 0 }];
            let mut gb = vec![0.0; if need_b { vb.len() } else { 0 }];
            for k in 0..g.len() {
                let (x, z) = (va[oa[k]], vb[ob[k]]);
                if is_div {
                    if need_a {
                        ga[oa[k]] += g[k] / z;
                    }
                    if need_b {
                        gb[ob[k]] -= g[k] * x / (z * z);
                    }
                } else {
                    if need_a {
                        ga[oa[k]] += g[k] * z;
                    }
                    if need_b {
                        gb[ob[k]] += g[k] * x;
                    }
                }
            }
            if need_a {
                accumulate(nodes, *a, &ga);
            }
            if need_b {
                accumulate(nodes, *b, &gb);
            }
        }
        Op::Scale(a, c) => {
            let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, *a, &ga);
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, *a, g),
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("matrix");
            let n = nodes[b.0].value.dims2().expect("matrix").1;
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm_nt(g, nodes[b.0].value.data(), &mut ga, m, n, k);
                accumulate(nodes, *a, &ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm_tn(nodes[a.0].value.data(), g, &mut gb, m, k, n);
                accumulate(nodes, *b, &gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a.0].value.dims2().expect("matrix");
            accumulate(nodes, *a, &transpose2(g, c, r));
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis] * inner;
                let mut gp = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                }
                accumulate(nodes, *p, &gp);
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[input.0].value.shape().to_vec();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = out_shape[*axis] * inner;
            let mut gi = vec![0.0; in_shape.iter().product()];
            for o in 0..outer {
                let base = (o * in_shape[*axis] + start) * inner;
                gi[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
            }
            accumulate(nodes, *input, &gi);
        }
        Op::Softmax(a) => {
            let d = *out_shape.last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for r in 0..g.len() / d {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gi[r * d + j] = ys[j] * (gs[j] - dot);
                }
            }
            accumulate(nodes, *a, &gi);
        }
        Op::LogSoftmax(a) => {
            let d = *out_shape.last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for r in 0..g.len() / d {
                let gs = &g[r * d..(r + 1) * d];
                let total: f64 = gs.iter().sum();
                for j in 0..d {
                    gi[r * d + j] = gs[j] - y[r * d + j].exp() * total;
                }
            }
            accumulate(nodes, *a, &gi);
        }
        Op::Sigmoid(a) => {
            let gi: Vec<f64> = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
            accumulate(nodes, *a, &gi);
        }
        Op::Tanh(a) => {
            let gi: Vec<f64> = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
            accumulate(nodes, *a, &gi);
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            let gi: Vec<f64> = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, *a, &gi);
        }
        Op::Gelu { input, tanh } => {
            let x = nodes[input.0].value.data();
            let gi: Vec<f64> = g.iter().zip(x).zip(tanh).map(|((g, &x), &t)| g * gelu_grad(x, t)).collect();
            accumulate(nodes, *input, &gi);
        }
        Op::LayerNorm { input, rstd } => {
            let d = *out_shape.last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let xh = &y[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let mg = gs.iter().sum::<f64>() / d as f64;
                let mgx = gs.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gi[r * d + j] = rs * (gs[j] - mg - xh[j] * mgx);
                }
            }
            accumulate(nodes, *input, &gi);
        }
        Op::Log(a) => {
            let x = nodes[a.0].value.data();
            let gi: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
            accumulate(nodes, *a, &gi);
        }
        Op::Exp(a) => {
            let gi: Vec<f64> = g.iter().zip(y).map(|(g, e)| g * e).collect();
            accumulate(nodes, *a, &gi);
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, *a, &vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, *a, &vec![g[0] / n as f64; n]);
        }
        Op::Embedding { table, ids } => {
            let d = out_shape[1];
            let mut gt = vec![0.0; nodes[table.0].value.numel()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[r * d + j];
                }
            }
            accumulate(nodes, *table, &gt);
        }
        Op::Gather { input, idx } => {
            let mut gi = vec![0.0; nodes[input.0].value.numel()];
            for (&i, gv) in idx.iter().zip(g) {
                gi[i] += gv;
            }
            accumulate(nodes, *input, &gi);
        }
        Op::Conv1d(info) => {
            let ck = info.c_in * info.kernel;
            if nodes[info.weight.0].requires_grad {
                let cols = im2col(nodes[info.input.0].value.data(), info);
                let mut gw = vec![0.0; info.c_out * ck];
                gemm_tn(g, &cols, &mut gw, info.t_out, info.c_out, ck);
                accumulate(nodes, info.weight, &gw);
            }
            if nodes[info.input.0].requires_grad {
                let mut gcols = vec![0.0; info.t_out * ck];
                gemm(g, nodes[info.weight.0].value.data(), &mut gcols, info.t_out, info.c_out, ck);
                let gi = col2im(&gcols, info);
                accumulate(nodes, info.input, &gi);
            }
        }
        Op::ConvTranspose1d(info) => {
            let (c_out, k) = (info.c_out, info.kernel);
            let mut dy = vec![0.0; info.t_in * c_out * k];
            for t in 0..info.t_in {
                for kk in 0..k {
                    let pos = (t * info.stride + kk) as isize - info.padding as isize;
                    if pos < 0 || pos as usize >= info.t_out {
                        continue;
                    }
                    for co in 0..c_out {
                        dy[t * c_out * k + co * k + kk] = g[pos as usize * c_out + co];
                    }
                }
            }
            if nodes[info.input.0].requires_grad {
                let mut gi = vec![0.0; info.t_in * info.c_in];
                gemm_nt(
                    &dy,
                    nodes[info.weight.0].value.data(),
                    &mut gi,
                    info.t_in,
                    c_out * k,
                    info.c_in,
                );
                accumulate(nodes, info.input, &gi);
            }
            if nodes[info.weight.0].requires_grad {
                let mut gw = vec![0.0; info.c_in * c_out * k];
                gemm_tn(
                    nodes[info.input.0].value.data(),
                    &dy,
                    &mut gw,
                    info.t_in,
                    info.c_in,
                    c_out * k,
                );
                accumulate(nodes, info.weight, &gw);
            }
        }
        Op::ScalarFn { input, grad } => {
            let gi: Vec<f64> = grad.iter().map(|v| v * g[0]).collect();
            accumulate(nodes, *input, &gi);
        }
    }
}

fn im2col(x: &[f64], info: &ConvInfo) -> Vec<f64> {
    let ck = info.c_in * info.kernel;
    let mut cols = vec![0.0; info.t_out * ck];
    for t in 0..info.t_out {
        let row = &mut cols[t * ck..(t + 1) * ck];
        for k in 0..info.kernel {
            let pos = (t * info.stride + k * info.dilation) as isize - info.padding as isize;
            if pos < 0 || pos as usize >= info.t_in {
                continue;
            }
            let src = &x[pos as usize * info.c_in..(pos as usize + 1) * info.c_in];
            for (ci, &v) in src.iter().enumerate() {
                row[ci * info.kernel + k] = v;
            }
        }
    }
    cols
}

fn col2im(gcols: &[f64], info: &ConvInfo) -> Vec<f64> {
    let ck = info.c_in * info.kernel;
    let mut gx = vec![0.0; info.t_in * info.c_in];
    for t in 0..info.t_out {
        let row = &gcols[t * ck..(t + 1) * ck];
        for k in 0..info.kernel {
            let pos = (t * info.stride + k * info.dilation) as isize - info.padding as isize;
            if pos < 0 || pos as usize >= info.t_in {
                continue;
            }
            let dst = &mut gx[pos as usize * info.c_in..(pos as usize + 1) * info.c_in];
            for (ci, d) in dst.iter_mut().enumerate() {
                *d += row[ci * info.kernel + k];
            }
        }
    }
    gx
}

/// Result shape of broadcasting `a` against `b` (numpy rules, singleton axes only).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the flat offset of the element of
/// `in_shape` it was broadcast from.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let n_in: usize = in_shape.iter().product();
    if n_in == total {
        return (0..total).collect();
    }
    // Trailing block repeated (bias rows) or leading block repeated along
    // the last axis (per-row scalars).
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(in_shape.iter().copied()).collect();
    if let Some(split) = (0..=rank).find(|&i| padded[i..] == out_shape[i..]) {
        if padded[..split].iter().all(|&d| d == 1) {
            return (0..total).map(|k| k % n_in).collect();
        }
    }
    if let Some(split) = (0..=rank).rev().find(|&i| padded[..i] == out_shape[..i]) {
        if padded[split..].iter().all(|&d| d == 1) {
            let inner: usize = out_shape[split..].iter().product();
            return (0..total).map(|k| k / inner).collect();
        }
    }
    strided_offsets(out_shape, in_shape)
}

fn strided_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        offs.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn row_softmax(t: &Tensor, log: bool) -> Tensor {
    let d = *t.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; t.numel()];
    for (src, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = src.iter().map(|v| (v - max).exp()).sum();
        if log {
            let lz = max + z.ln();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = v - lz;
            }
        } else {
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - max).exp() / z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_fast_paths_match_strided_walk() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[4, 3], &[3]),
            (&[4, 3], &[1, 3]),
            (&[4, 3], &[4, 1]),
            (&[4, 3], &[1]),
            (&[2, 4, 3], &[4, 3]),
            (&[2, 4, 3], &[2, 1, 1]),
            (&[2, 4, 3], &[2, 1, 3]),
            (&[2, 4, 3], &[1, 4, 1]),
            (&[5], &[5]),
        ];
        for (out, inp) in cases {
            assert_eq!(broadcast_offsets(out, inp), strided_offsets(out, inp), "{out:?} <- {inp:?}");
        }
    }

    fn mat(g: &mut Graph, r: usize, c: usize, f: impl Fn(usize) -> f64) -> Var {
        g.leaf(Tensor::new(vec![r, c], (0..r * c).map(f).collect()).unwrap())
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, |i| i as f64);
        let b = mat(&mut g, 3, 4, |i| i as f64);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let err = g.matmul(b, a).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[3, 4]") && err.contains("[2, 3]"),
            "{err}"
        );
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 7, |_| 3.5);
        let s = g.softmax(a);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 1, 9, |i| (i as f64 * 1.7).sin() * 3.0 + 2.0);
        let n = g.layer_norm(a, 1e-12);
        let v = g.value(n).data();
        let mean = v.iter().sum::<f64>() / 9.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, |i| i as f64 - 2.5);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, |i| i as f64 - 2.5);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let expect: Vec<f64> = (0..6).map(|i| 2.0 * (i as f64 - 2.5)).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn fan_out_sums_contributions() {
        // loss = sum(x*x) + sum(3x): grad = 2x + 3
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 4, |i| i as f64);
        let sq = g.mul(x, x).unwrap();
        let f = g.sum(sq);
        let t = g.scale(x, 3.0);
        let h = g.sum(t);
        let loss = g.add(f, h).unwrap();
        g.backward(loss).unwrap();
        let expect: Vec<f64> = (0..4).map(|i| 2.0 * i as f64 + 3.0).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, |i| i as f64);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[2, 3]), None);
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn intermediate_grads_are_freed_unless_retained() {
        let mut g = Graph::new();
        let x = mat(&mut g, 1, 3, |i| i as f64);
        let y = g.scale(x, 2.0);
        let z = g.scale(x, 3.0);
        g.retain_grad(z);
        let s1 = g.sum(y);
        let s2 = g.sum(z);
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad(z).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut g = Graph::new();
        let x = mat(&mut g, 11, 2, |i| (i as f64 * 0.37).cos());
        let w = g.leaf(Tensor::new(vec![3, 2, 4], (0..24).map(|i| (i as f64 * 0.11).sin()).collect()).unwrap());
        let y = g.conv1d(x, w, 2, 1, 2).unwrap();
        let (xv, wv) = (g.value(x).data().to_vec(), g.value(w).data().to_vec());
        let t_out = (11 + 2 - 2 * 3 - 1) / 2 + 1;
        assert_eq!(g.shape(y), &[t_out, 3]);
        for t in 0..t_out {
            for o in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for k in 0..4 {
                        let p = (t * 2 + k * 2) as isize - 1;
                        if p >= 0 && (p as usize) < 11 {
                            acc += xv[p as usize * 2 + c] * wv[o * 8 + c * 4 + k];
                        }
                    }
                }
                assert!((g.value(y).data()[t * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_length() {
        let mut g = Graph::new();
        let x = mat(&mut g, 10, 4, |i| i as f64);
        let w = g.leaf(Tensor::zeros(&[4, 1, 16]));
        let y = g.conv_transpose1d(x, w, 8, 0).unwrap();
        assert_eq!(g.shape(y), &[9 * 8 + 16, 1]);
    }
}
