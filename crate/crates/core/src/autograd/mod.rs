//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound by name from a [`ParamStore`]; after [`Graph::backward`] the
//! gradients of every bound, trainable parameter that was reached can be
//! read back by name. Parameters that the loss never touched report no
//! gradient at all, which keeps their optimizer state untouched.

pub mod conv;
mod params;

use std::collections::{BTreeMap, HashMap};

pub use params::ParamStore;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use conv::{conv_backward, conv_forward, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Slice1d {
        x: Var,
        start: usize,
    },
    SliceChannel {
        x: Var,
        c: usize,
    },
    GatedMix {
        feats: Vec<Var>,
        logits: Vec<Var>,
        weights: Vec<f64>,
    },
    MeanAbsDiff {
        x: Var,
        target: Tensor,
    },
    MeanSqDiff {
        x: Var,
        target: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with `prefix` are bound without gradients.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf; gradients are readable through [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Binds (once per graph) the named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (batch, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc, k, k2) = self.value(w).dims4();
        assert_eq!(wc, c_in, "conv weight expects {wc} input channels, got {c_in}");
        assert_eq!(k, k2);
        assert_eq!(self.value(b).numel(), c_out);
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
        };
        let (out, cols) = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![batch, c_out, geom.out_h(), geom.out_w()], out);
        // Columns are only needed for the weight gradient.
        let cols = if self.rg(w) || self.rg(b) { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * 4 * h * w];
        for p in 0..b * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![b, c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    /// Concatenates `[B, C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (b, _, h, w) = self.value(parts[0]).dims4();
        let total: usize = parts
            .iter()
            .map(|p| {
                let (pb, pc, ph, pw) = self.value(*p).dims4();
                assert_eq!((pb, ph, pw), (b, h, w), "concat of mismatched shapes");
                pc
            })
            .sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for p in parts {
                let (_, pc, _, _) = self.value(*p).dims4();
                out.extend_from_slice(&self.value(*p).data()[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(vec![b, total, h, w], out), Op::Concat(parts.to_vec()), rg)
    }

    /// `x * (gamma + 1) + beta` with per-channel `gamma`, `beta` of length C.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).numel(), c);
        assert_eq!(self.value(beta).numel(), c);
        let plane = h * w;
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let scale = g[ci] + 1.0;
                for v in &mut out[(bi * c + ci) * plane..][..plane] {
                    *v = *v * scale + be[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(vec![b, c, h, w], out),
            Op::ChannelAffine { x, gamma, beta },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// `w x + b` for a vector `x` of length D and `w` of shape `[O, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let d = self.value(x).numel();
        let (o, wd) = match self.value(w).shape() {
            [o, wd] => (*o, *wd),
            s => panic!("linear weight must be rank 2, got {s:?}"),
        };
        assert_eq!(wd, d);
        assert_eq!(self.value(b).numel(), o);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let out: Vec<f64> = (0..o)
            .map(|r| {
                self.value(b).data()[r]
                    + ws[r * d..(r + 1) * d].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![o], out), Op::Linear { x, w, b }, rg)
    }

    /// Elements `start..start + len` of a flat tensor.
    pub fn slice1d(&mut self, x: Var, start: usize, len: usize) -> Var {
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![len], data), Op::Slice1d { x, start }, rg)
    }

    /// Channel `c` of `[B, C, H, W]` as `[B, 1, H, W]`.
    pub fn slice_channel(&mut self, x: Var, c: usize) -> Var {
        let value = self.value(x).channel(c);
        let rg = self.rg(x);
        self.push(value, Op::SliceChannel { x, c }, rg)
    }

    /// Per-pixel softmax over stream logits, then the weighted sum of the
    /// stream features. `feats[s]` is `[B, C, H, W]`, `logits[s]` is `[B, 1, H, W]`.
    pub fn gated_mix(&mut self, feats: &[Var], logits: &[Var]) -> Var {
        assert_eq!(feats.len(), logits.len());
        assert!(!feats.is_empty());
        let (b, c, h, w) = self.value(feats[0]).dims4();
        let plane = h * w;
        let s = feats.len();
        // weights laid out as [S, B, plane]
        let mut weights = vec![0.0; s * b * plane];
        for bi in 0..b {
            for p in 0..plane {
                let idx = bi * plane + p;
                let max = logits
                    .iter()
                    .map(|l| self.value(*l).data()[idx])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (si, l) in logits.iter().enumerate() {
                    let e = (self.value(*l).data()[idx] - max).exp();
                    weights[si * b * plane + idx] = e;
                    z += e;
                }
                for si in 0..s {
                    weights[si * b * plane + idx] /= z;
                }
            }
        }
        let mut out = vec![0.0; b * c * plane];
        for (si, f) in feats.iter().enumerate() {
            assert_eq!(self.value(*f).dims4(), (b, c, h, w));
            let fd = self.value(*f).data();
            for bi in 0..b {
                let wrow = &weights[si * b * plane + bi * plane..][..plane];
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for p in 0..plane {
                        out[off + p] += wrow[p] * fd[off + p];
                    }
                }
            }
        }
        let rg = feats.iter().chain(logits).any(|v| self.rg(*v));
        self.push(
            Tensor::new(vec![b, c, h, w], out),
            Op::GatedMix {
                feats: feats.to_vec(),
                logits: logits.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// Mean absolute difference to a constant target (scalar output).
    pub fn mean_abs_diff(&mut self, x: Var, target: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), target.shape());
        let n = target.numel() as f64;
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanAbsDiff { x, target }, rg)
    }

    /// Mean squared difference to a constant scalar (scalar output).
    pub fn mean_sq_diff(&mut self, x: Var, target: f64) -> Var {
        let d = self.value(x).data();
        let v = d.iter().map(|a| (a - target).powi(2)).sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanSqDiff { x, target }, rg)
    }

    /// `sum_k w_k * x_k` over scalar vars; empty input yields the constant 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(x, w)| w * self.value(*x).item()).sum();
        let rg = terms.iter().any(|(x, _)| self.rg(*x));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(i, &gout);
            self.grads[i] = Some(gout);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
    }

    fn local_grads(&self, i: usize, gout: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let go = gout.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, geom, cols } => {
                let need_x = self.rg(*x);
                let need_w = self.rg(*w) || self.rg(*b);
                let grads = conv_backward(go, self.value(*w).data(), cols, geom, need_x, need_w);
                let mut out = Vec::new();
                if let Some(dx) = grads.dx {
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)));
                }
                if let (Some(dw), Some(db)) = (grads.dw, grads.db) {
                    out.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)));
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)));
                }
                out
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let s = &go[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, Tensor::new(vec![b, c, h, w], dx))]
            }
            Op::Concat(parts) => {
                let (b, total, h, w) = node.value.dims4();
                let plane = h * w;
                let mut out = Vec::new();
                let mut offset = 0;
                for p in parts {
                    let (_, pc, _, _) = self.value(*p).dims4();
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(b * pc * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            d.extend_from_slice(&go[start..start + pc * plane]);
                        }
                        out.push((*p, Tensor::new(vec![b, pc, h, w], d)));
                    }
                    offset += pc;
                }
                out
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (b, c, h, w) = node.value.dims4();
                let plane = h * w;
                let xs = self.value(*x).data();
                let gs = self.value(*gamma).data();
                let mut out = Vec::new();
                if self.rg(*x) {
                    let mut dx = go.to_vec();
                    for bi in 0..b {
                        for ci in 0..c {
                            let scale = gs[ci] + 1.0;
                            dx[(bi * c + ci) * plane..][..plane].iter_mut().for_each(|v| *v *= scale);
                        }
                    }
                    out.push((*x, Tensor::new(vec![b, c, h, w], dx)));
                }
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for p in 0..plane {
                            dg[ci] += go[off + p] * xs[off + p];
                            db[ci] += go[off + p];
                        }
                    }
                }
                out.push((*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dg)));
                out.push((*beta, Tensor::new(self.value(*beta).shape().to_vec(), db)));
                out
            }
            Op::LeakyRelu(x, slope) => {
                let xs = self.value(*x).data();
                let d = go
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| if *v > 0.0 { *g } else { slope * g })
                    .collect();
                vec![(*x, Tensor::new(node.value.shape().to_vec(), d))]
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                let d = go.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*x, Tensor::new(node.value.shape().to_vec(), d))]
            }
            Op::Silu(x) => {
                let xs = self.value(*x).data();
                let d = go
                    .iter()
                    .zip(xs)
                    .map(|(g, v)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                vec![(*x, Tensor::new(node.value.shape().to_vec(), d))]
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let (o, d) = (go.len(), xs.len());
                let mut out = Vec::new();
                if self.rg(*x) {
                    let mut dx = vec![0.0; d];
                    for r in 0..o {
                        for (k, dxk) in dx.iter_mut().enumerate() {
                            *dxk += go[r] * ws[r * d + k];
                        }
                    }
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)));
                }
                if self.rg(*w) || self.rg(*b) {
                    let mut dw = vec![0.0; o * d];
                    for r in 0..o {
                        for k in 0..d {
                            dw[r * d + k] = go[r] * xs[k];
                        }
                    }
                    out.push((*w, Tensor::new(vec![o, d], dw)));
                    out.push((*b, Tensor::new(vec![o], go.to_vec())));
                }
                out
            }
            Op::Slice1d { x, start } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                d[*start..*start + go.len()].copy_from_slice(go);
                vec![(*x, Tensor::new(self.value(*x).shape().to_vec(), d))]
            }
            Op::SliceChannel { x, c } => {
                let (b, ch, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let mut d = vec![0.0; b * ch * plane];
                for bi in 0..b {
                    d[(bi * ch + c) * plane..][..plane].copy_from_slice(&go[bi * plane..(bi + 1) * plane]);
                }
                vec![(*x, Tensor::new(vec![b, ch, h, w], d))]
            }
            Op::GatedMix {
                feats,
                logits,
                weights,
            } => {
                let (b, c, h, w) = node.value.dims4();
                let plane = h * w;
                let s = feats.len();
                let mut out = Vec::new();
                // dL/dw_s at each pixel
                let mut dweight = vec![0.0; s * b * plane];
                for (si, f) in feats.iter().enumerate() {
                    let fd = self.value(*f).data();
                    let mut df = if self.rg(*f) { Some(vec![0.0; b * c * plane]) } else { None };
                    for bi in 0..b {
                        let widx = si * b * plane + bi * plane;
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                dweight[widx + p] += go[off + p] * fd[off + p];
                                if let Some(df) = df.as_mut() {
                                    df[off + p] = go[off + p] * weights[widx + p];
                                }
                            }
                        }
                    }
                    if let Some(df) = df {
                        out.push((*f, Tensor::new(vec![b, c, h, w], df)));
                    }
                }
                let mut mean_dw = vec![0.0; b * plane];
                for si in 0..s {
                    for idx in 0..b * plane {
                        mean_dw[idx] += weights[si * b * plane + idx] * dweight[si * b * plane + idx];
                    }
                }
                for (si, l) in logits.iter().enumerate() {
                    if !self.rg(*l) {
                        continue;
                    }
                    let d = (0..b * plane)
                        .map(|idx| {
                            let k = si * b * plane + idx;
                            weights[k] * (dweight[k] - mean_dw[idx])
                        })
                        .collect();
                    out.push((*l, Tensor::new(vec![b, 1, h, w], d)));
                }
                out
            }
            Op::MeanAbsDiff { x, target } => {
                let g = go[0] / target.numel() as f64;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, t)| {
                        let r = a - t;
                        if r > 0.0 {
                            g
                        } else if r < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*x, Tensor::new(target.shape().to_vec(), d))]
            }
            Op::MeanSqDiff { x, target } => {
                let xs = self.value(*x).data();
                let g = 2.0 * go[0] / xs.len() as f64;
                let d = xs.iter().map(|a| g * (a - target)).collect();
                vec![(*x, Tensor::new(self.value(*x).shape().to_vec(), d))]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .filter(|(x, _)| self.rg(*x))
                .map(|(x, w)| (*x, Tensor::scalar(go[0] * w)))
                .collect(),
        }
    }

    /// Gradients of bound, trainable parameters that the last backward
    /// pass reached.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// Names of every parameter bound into this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }
}
