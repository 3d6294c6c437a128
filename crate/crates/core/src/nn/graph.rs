//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! [`Gradients`] for every node that depends on a differentiable leaf.
//!
//! Image tensors are laid out `[C, H, W]` for a single sample; batching is
//! done by the callers, one graph per sample.

use std::borrow::Cow;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Clamp range of the per-pixel log-variance.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Execution mode. Dropout samples in `Train` and `McInfer`, and is the
/// identity in `DetInfer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    McInfer,
    DetInfer,
}

impl Mode {
    pub fn stochastic(self) -> bool {
        !matches!(self, Mode::DetInfer)
    }
}

/// Kind and hyperparameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
    Dropout {
        p: f64,
    },
    UpsampleNearest {
        factor: usize,
    },
    Concat,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel % 2 == 0 {
                    return Err(Error::config(format!("bad conv2d {self:?}")));
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::config(format!("bad maxpool {self:?}")));
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::config(format!("bad dense {self:?}")));
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::config(format!("dropout p={p} outside [0, 1)")));
                }
            }
            LayerSpec::UpsampleNearest { factor } => {
                if factor == 0 {
                    return Err(Error::config("upsample factor 0"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of (weight, bias) for layers that own parameters.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => Vec::new(),
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Concat(usize, usize),
    ChannelScale {
        x: usize,
        g: usize,
    },
    Mul(usize, usize),
    Add(usize, usize),
    Sum(usize),
    Reshape(usize),
    CrossEntropy {
        p: usize,
        labels: Tensor,
        pixel_weight: Vec<f64>,
        total_weight: f64,
    },
    Aleatoric {
        z: usize,
        s: usize,
        target: Vec<usize>,
        pixel_weight: Vec<f64>,
        total_weight: f64,
        samples: usize,
        noise: Vec<f64>,
    },
    Mse {
        pred: usize,
        target: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major) as checked by the callers' shape logic.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = Vec::with_capacity(c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h || x0 >= x1 {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    cols.resize(cols.len() + x0, 0.0);
                    cols.extend_from_slice(&src[x0 + kx - pad..x1 + kx - pad]);
                    cols.resize(cols.len() + w - x1, 0.0);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - pad) * w..(sy - pad + 1) * w];
                    let line = &src[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        dst[xx + kx - pad] += line[xx];
                    }
                }
            }
        }
    }
}

fn pool_extent(n: usize, k: usize, stride: usize) -> usize {
    if n <= k {
        1
    } else {
        (n - k).div_ceil(stride) + 1
    }
}

fn spatial(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "{what} expects [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn one_hot_targets(labels: &Tensor, classes: usize) -> Result<Vec<usize>> {
    let n = labels.len() / classes;
    let d = labels.data();
    (0..n)
        .map(|i| {
            let mut target = None;
            for c in 0..classes {
                let v = d[c * n + i];
                if v == 1.0 && target.is_none() {
                    target = Some(c);
                } else if v != 0.0 {
                    return Err(Error::shape("labels are not one-hot"));
                }
            }
            target.ok_or_else(|| Error::shape("labels are not one-hot"))
        })
        .collect()
}

fn pixel_weights(
    labels: &Tensor,
    classes: usize,
    class_weights: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    let n = labels.len() / classes;
    let d = labels.data();
    let w: Vec<f64> = match class_weights {
        None => vec![1.0; n],
        Some(cw) => {
            if cw.len() != classes {
                return Err(Error::shape(format!(
                    "{} class weights for {classes} classes",
                    cw.len()
                )));
            }
            (0..n)
                .map(|i| (0..classes).map(|c| d[c * n + i] * cw[c]).sum())
                .collect()
        }
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("total label weight is zero"));
    }
    Ok((w, total))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf holding data that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient can be queried with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing a parameter; differentiable iff the tensor requires grad.
    pub fn param(&mut self, set: &'a ParamSet, id: ParamId) -> Var {
        let t = set.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Same-padded, stride-1 2D convolution. `w` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c, h, wd) = spatial(self.value(x), "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [cout, cin, k, k2] = ws[..] else {
            return Err(Error::shape(format!("conv2d weight shape {ws:?}")));
        };
        if cin != c || k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d weight {ws:?} on input with {c} channels"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d bias shape"));
            }
        }
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        let r = cin * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if k == 1 {
            gemm(cout, r, hw, wv, (r, 1), xv, (hw, 1), &mut out, 1.0);
        } else {
            let cols = im2col(xv, cin, h, wd, k);
            gemm(cout, r, hw, wv, (r, 1), &cols, (hw, 1), &mut out, 1.0);
        }
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        self.push(
            Tensor::new(vec![cout, h, wd], out)?,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
            "conv2d",
        )
    }

    /// Max pooling; windows that overhang the border are truncated.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = spatial(self.value(x), "max_pool")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("max_pool with zero extent"));
        }
        let (oh, ow) = (pool_extent(h, kernel, stride), pool_extent(w, kernel, stride));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    let mut best = base + y0 * w + x0;
                    for y in y0..(y0 + kernel).min(h) {
                        for xx in x0..(x0 + kernel).min(w) {
                            let i = base + y * w + xx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::MaxPool { x: x.0, argmax },
            needs,
            "max_pool",
        )
    }

    /// Fully connected layer on the flattened input. `w` is `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let n_in = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        let [n_out, wi] = ws[..] else {
            return Err(Error::shape(format!("dense weight shape {ws:?}")));
        };
        if wi != n_in {
            return Err(Error::shape(format!(
                "dense weight {ws:?} on input of length {n_in}"
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out: Vec<f64> = match b {
            Some(b) => {
                if self.value(b).shape() != [n_out] {
                    return Err(Error::shape("dense bias shape"));
                }
                self.value(b).data().to_vec()
            }
            None => vec![0.0; n_out],
        };
        for (o, v) in out.iter_mut().enumerate() {
            let row = &wv[o * n_in..(o + 1) * n_in];
            *v += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        let needs = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|b| self.needs(b.0));
        self.push(
            Tensor::new(vec![n_out], out)?,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            needs,
            "dense",
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.needs(x.0);
        self.push(out, op, needs, what)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x.0), "sigmoid")
    }

    /// Softmax over the leading (class) axis of `[C, ...]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("softmax on rank-0 tensor"))?;
        let n = t.len() / c;
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        for i in 0..n {
            let m = (0..c).map(|k| d[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..c {
                let e = (d[k * n + i] - m).exp();
                out[k * n + i] = e;
                s += e;
            }
            for k in 0..c {
                out[k * n + i] /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x.0);
        self.push(out, Op::Softmax(x.0), needs, "softmax")
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`. Identity when
    /// `active` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, active: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout p={p} outside [0, 1)")));
        }
        if !active || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let needs = self.needs(x.0);
        self.push(out, Op::Dropout { x: x.0, mask }, needs, "dropout")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = spatial(self.value(x), "upsample")?;
        if factor == 0 {
            return Err(Error::shape("upsample factor 0"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let d = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ci * oh + y) * ow + xx] = d[(ci * h + y / factor) * w + xx / factor];
                }
            }
        }
        let needs = self.needs(x.0);
        self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::Upsample { x: x.0, factor },
            needs,
            "upsample",
        )
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(Tensor::new(shape, data)?, Op::Concat(a.0, b.0), needs, "concat")
    }

    /// Multiplies channel `c` of `x: [C, ...]` by `g[c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.value(x).shape()[0];
        if self.value(g).len() != c {
            return Err(Error::shape(format!(
                "gate of length {} for {c} channels",
                self.value(g).len()
            )));
        }
        let mut out = self.value(x).clone();
        out.set_requires_grad(false);
        let gv = self.value(g).data();
        for ci in 0..c {
            let s = gv[ci];
            out.plane_mut(ci).iter_mut().for_each(|v| *v *= s);
        }
        let needs = self.needs(x.0) || self.needs(g.0);
        self.push(out, Op::ChannelScale { x: x.0, g: g.0 }, needs, "channel_scale")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )?;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, op, needs, "elementwise")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs, "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x.0);
        self.push(t, Op::Reshape(x.0), needs, "reshape")
    }

    /// Applies one [`LayerSpec`]. `params` holds (weight, bias) for
    /// layers that own parameters and the second operand for `Concat`.
    pub fn forward_layer(
        &mut self,
        layer: &LayerSpec,
        x: Var,
        params: &[Var],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        layer.validate()?;
        let need = |n: usize| -> Result<()> {
            if params.len() < n {
                Err(Error::shape(format!("{layer:?} needs {n} operands")))
            } else {
                Ok(())
            }
        };
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                need(2)?;
                let ws = self.value(params[0]).shape();
                if ws != [out_channels, in_channels, kernel, kernel] {
                    return Err(Error::shape(format!("{layer:?} with weight {ws:?}")));
                }
                self.conv2d(x, params[0], Some(params[1]))
            }
            LayerSpec::Dense { inputs, outputs } => {
                need(2)?;
                if self.value(params[0]).shape() != [outputs, inputs] {
                    return Err(Error::shape(format!("{layer:?} weight shape")));
                }
                self.dense(x, params[0], Some(params[1]))
            }
            LayerSpec::MaxPool2d { kernel, stride } => self.max_pool(x, kernel, stride),
            LayerSpec::Relu => self.relu(x),
            LayerSpec::Sigmoid => self.sigmoid(x),
            LayerSpec::Softmax => self.softmax(x),
            LayerSpec::Dropout { p } => self.dropout(x, p, mode.stochastic(), rng),
            LayerSpec::UpsampleNearest { factor } => self.upsample_nearest(x, factor),
            LayerSpec::Concat => {
                need(1)?;
                self.concat(x, params[0])
            }
        }
    }

    /// Mean over pixels of `-sum_c y_c ln(max(p_c, 1e-12))`, optionally
    /// weighted per class. `probs` and `labels` are `[C, ...]`.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        labels: &Tensor,
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.shape() != labels.shape() || p.rank() == 0 {
            return Err(Error::shape(format!(
                "cross_entropy probs {:?} vs labels {:?}",
                p.shape(),
                labels.shape()
            )));
        }
        let c = p.shape()[0];
        let n = p.len() / c;
        let (pixel_weight, total_weight) = pixel_weights(labels, c, class_weights)?;
        let (pd, ld) = (p.data(), labels.data());
        let mut loss = 0.0;
        for i in 0..n {
            let mut li = 0.0;
            for k in 0..c {
                let y = ld[k * n + i];
                if y != 0.0 {
                    li -= y * pd[k * n + i].max(PROB_FLOOR).ln();
                }
            }
            loss += pixel_weight[i] * li;
        }
        loss /= total_weight;
        let needs = self.needs(probs.0);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p: probs.0,
                labels: labels.clone(),
                pixel_weight,
                total_weight,
            },
            needs,
            "cross_entropy",
        )
    }

    /// Noise-injected cross-entropy: per pixel, the loss is the
    /// cross-entropy of the mean over `samples` draws of
    /// `softmax(z + u * eps_t)`, with `u = exp(s / 2)` sharing one scale per
    /// pixel and `eps_t` i.i.d. standard normal per logit.
    ///
    /// `z` is `[C, H, W]`, `log_var` is `[1, H, W]` (clamped to
    /// `[-20, 20]`), `labels` is one-hot `[C, H, W]`.
    pub fn aleatoric_loss(
        &mut self,
        z: Var,
        log_var: Var,
        labels: &Tensor,
        samples: usize,
        rng: &mut Rng,
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        if samples == 0 {
            return Err(Error::arg("aleatoric_loss with T = 0"));
        }
        let zt = self.value(z);
        let st = self.value(log_var);
        if zt.shape() != labels.shape() || zt.rank() == 0 {
            return Err(Error::shape(format!(
                "aleatoric_loss logits {:?} vs labels {:?}",
                zt.shape(),
                labels.shape()
            )));
        }
        let c = zt.shape()[0];
        let n = zt.len() / c;
        if st.len() != n {
            return Err(Error::shape(format!(
                "log-variance {:?} for {n} pixels",
                st.shape()
            )));
        }
        let target = one_hot_targets(labels, c)?;
        let (pixel_weight, total_weight) = pixel_weights(labels, c, class_weights)?;
        let noise: Vec<f64> = (0..samples * c * n)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let (zd, sd) = (zt.data(), st.data());
        let mut loss = 0.0;
        let mut a = vec![0.0; c];
        let mut lp = vec![0.0; samples];
        for i in 0..n {
            let u = (sd[i].clamp(LOG_VAR_MIN, LOG_VAR_MAX) / 2.0).exp();
            for (t, lpt) in lp.iter_mut().enumerate() {
                for (k, ak) in a.iter_mut().enumerate() {
                    *ak = zd[k * n + i] + u * noise[(t * c + k) * n + i];
                }
                *lpt = a[target[i]] - logsumexp(&a);
            }
            let log_mean = logsumexp(&lp) - (samples as f64).ln();
            loss -= pixel_weight[i] * log_mean.max(PROB_FLOOR.ln());
        }
        loss /= total_weight;
        let needs = self.needs(z.0) || self.needs(log_var.0);
        self.push(
            Tensor::scalar(loss),
            Op::Aleatoric {
                z: z.0,
                s: log_var.0,
                target,
                pixel_weight,
                total_weight,
                samples,
                noise,
            },
            needs,
            "aleatoric_loss",
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || target.is_empty() {
            return Err(Error::shape(format!(
                "mse on {} predictions and {} targets",
                p.len(),
                target.len()
            )));
        }
        let l = p
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        let needs = self.needs(pred.0);
        self.push(
            Tensor::scalar(l),
            Op::Mse {
                pred: pred.0,
                target: target.to_vec(),
            },
            needs,
            "mse",
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Backward("no forward pass recorded".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss head has shape {:?}, expected a scalar",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| -> &Tensor { &self.nodes[j].value };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (cin, h, wd) = spatial(val(*x), "conv2d").expect("checked in forward");
                let ws = val(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let hw = h * wd;
                let r = cin * k * k;
                let xv = val(*x).data();
                let cols_owned;
                let cols: &[f64] = if k == 1 {
                    xv
                } else {
                    cols_owned = im2col(xv, cin, h, wd, k);
                    &cols_owned
                };
                if self.needs(*w) {
                    add_into(&mut grads[*w], cout * r, |dw| {
                        gemm(cout, hw, r, gy, (hw, 1), cols, (1, hw), dw, 1.0)
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        add_into(&mut grads[*b], cout, |db| {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += gy[co * hw..(co + 1) * hw].iter().sum::<f64>();
                            }
                        });
                    }
                }
                if self.needs(*x) {
                    let wv = val(*w).data();
                    if k == 1 {
                        add_into(&mut grads[*x], cin * hw, |dx| {
                            gemm(r, cout, hw, wv, (1, r), gy, (hw, 1), dx, 1.0)
                        });
                    } else {
                        let mut dcols = vec![0.0; r * hw];
                        gemm(r, cout, hw, wv, (1, r), gy, (hw, 1), &mut dcols, 0.0);
                        add_into(&mut grads[*x], cin * hw, |dx| {
                            col2im(&dcols, cin, h, wd, k, dx)
                        });
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    add_into(&mut grads[*x], val(*x).len(), |dx| {
                        for (g, &j) in gy.iter().zip(argmax) {
                            dx[j] += g;
                        }
                    });
                }
            }
            Op::Dense { x, w, b } => {
                let xv = val(*x).data();
                let n_in = xv.len();
                if self.needs(*w) {
                    add_into(&mut grads[*w], gy.len() * n_in, |dw| {
                        for (o, g) in gy.iter().enumerate() {
                            for (d, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(xv) {
                                *d += g * xi;
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        add_into(&mut grads[*b], gy.len(), |db| {
                            db.iter_mut().zip(gy).for_each(|(d, g)| *d += g)
                        });
                    }
                }
                if self.needs(*x) {
                    let wv = val(*w).data();
                    add_into(&mut grads[*x], n_in, |dx| {
                        for (o, g) in gy.iter().enumerate() {
                            for (d, wi) in dx.iter_mut().zip(&wv[o * n_in..(o + 1) * n_in]) {
                                *d += g * wi;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = val(*x).data();
                    add_into(&mut grads[*x], xv.len(), |dx| {
                        for ((d, g), v) in dx.iter_mut().zip(gy).zip(xv) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yv = node.value.data();
                    add_into(&mut grads[*x], yv.len(), |dx| {
                        for ((d, g), y) in dx.iter_mut().zip(gy).zip(yv) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let yv = node.value.data();
                    let c = node.value.shape()[0];
                    let n = yv.len() / c;
                    add_into(&mut grads[*x], yv.len(), |dx| {
                        for p in 0..n {
                            let dot: f64 = (0..c).map(|k| yv[k * n + p] * gy[k * n + p]).sum();
                            for k in 0..c {
                                dx[k * n + p] += yv[k * n + p] * (gy[k * n + p] - dot);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    add_into(&mut grads[*x], mask.len(), |dx| {
                        for ((d, g), m) in dx.iter_mut().zip(gy).zip(mask) {
                            *d += g * m;
                        }
                    });
                }
            }
            Op::Upsample { x, factor } => {
                if self.needs(*x) {
                    let (c, h, w) = spatial(val(*x), "upsample").expect("checked in forward");
                    let (oh, ow) = (h * factor, w * factor);
                    add_into(&mut grads[*x], c * h * w, |dx| {
                        for ci in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dx[(ci * h + y / factor) * w + xx / factor] +=
                                        gy[(ci * oh + y) * ow + xx];
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat(a, b) => {
                let na = val(*a).len();
                if self.needs(*a) {
                    add_into(&mut grads[*a], na, |d| {
                        d.iter_mut().zip(&gy[..na]).for_each(|(d, g)| *d += g)
                    });
                }
                if self.needs(*b) {
                    let nb = val(*b).len();
                    add_into(&mut grads[*b], nb, |d| {
                        d.iter_mut().zip(&gy[na..]).for_each(|(d, g)| *d += g)
                    });
                }
            }
            Op::ChannelScale { x, g } => {
                let xt = val(*x);
                let c = xt.shape()[0];
                let plane = xt.len() / c;
                let gv = val(*g).data();
                if self.needs(*x) {
                    add_into(&mut grads[*x], xt.len(), |dx| {
                        for ci in 0..c {
                            let s = gv[ci];
                            for j in ci * plane..(ci + 1) * plane {
                                dx[j] += gy[j] * s;
                            }
                        }
                    });
                }
                if self.needs(*g) {
                    let xv = xt.data();
                    add_into(&mut grads[*g], c, |dg| {
                        for (ci, d) in dg.iter_mut().enumerate() {
                            let r = ci * plane..(ci + 1) * plane;
                            *d += gy[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.needs(*a) {
                    add_into(&mut grads[*a], av.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(gy).zip(bv) {
                            *d += g * y;
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(&mut grads[*b], bv.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(gy).zip(av) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if self.needs(j) {
                        add_into(&mut grads[j], gy.len(), |d| {
                            d.iter_mut().zip(gy).for_each(|(d, g)| *d += g)
                        });
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let n = val(*x).len();
                    add_into(&mut grads[*x], n, |d| d.iter_mut().for_each(|d| *d += gy[0]));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    add_into(&mut grads[*x], gy.len(), |d| {
                        d.iter_mut().zip(gy).for_each(|(d, g)| *d += g)
                    });
                }
            }
            Op::CrossEntropy {
                p,
                labels,
                pixel_weight,
                total_weight,
            } => {
                if self.needs(*p) {
                    let pv = val(*p).data();
                    let c = labels.shape()[0];
                    let n = pv.len() / c;
                    let ld = labels.data();
                    add_into(&mut grads[*p], pv.len(), |d| {
                        for i in 0..n {
                            let scale = gy[0] * pixel_weight[i] / total_weight;
                            for k in 0..c {
                                let j = k * n + i;
                                if ld[j] != 0.0 && pv[j] > PROB_FLOOR {
                                    d[j] -= scale * ld[j] / pv[j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Aleatoric {
                z,
                s,
                target,
                pixel_weight,
                total_weight,
                samples,
                noise,
            } => {
                let (zd, sd) = (val(*z).data(), val(*s).data());
                let c = val(*z).shape()[0];
                let n = zd.len() / c;
                let t_count = *samples;
                let mut dz = vec![0.0; zd.len()];
                let mut ds = vec![0.0; sd.len()];
                let mut a = vec![0.0; c];
                let mut probs = vec![0.0; t_count * c];
                let mut lp = vec![0.0; t_count];
                for i in 0..n {
                    let sc = sd[i].clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                    let u = (sc / 2.0).exp();
                    let y = target[i];
                    for t in 0..t_count {
                        for (k, ak) in a.iter_mut().enumerate() {
                            *ak = zd[k * n + i] + u * noise[(t * c + k) * n + i];
                        }
                        let lse = logsumexp(&a);
                        for k in 0..c {
                            probs[t * c + k] = (a[k] - lse).exp();
                        }
                        lp[t] = a[y] - lse;
                    }
                    let log_sum = logsumexp(&lp);
                    if log_sum - (t_count as f64).ln() < PROB_FLOOR.ln() {
                        continue;
                    }
                    let scale = gy[0] * pixel_weight[i] / total_weight;
                    let mut du = 0.0;
                    for t in 0..t_count {
                        let wt = (lp[t] - log_sum).exp();
                        for k in 0..c {
                            let delta = if k == y { 1.0 } else { 0.0 };
                            let r = wt * (delta - probs[t * c + k]);
                            dz[k * n + i] -= scale * r;
                            du -= scale * r * noise[(t * c + k) * n + i];
                        }
                    }
                    if sd[i] > LOG_VAR_MIN && sd[i] < LOG_VAR_MAX {
                        ds[i] = du * u / 2.0;
                    }
                }
                if self.needs(*z) {
                    add_into(&mut grads[*z], dz.len(), |d| {
                        d.iter_mut().zip(&dz).for_each(|(d, g)| *d += g)
                    });
                }
                if self.needs(*s) {
                    add_into(&mut grads[*s], ds.len(), |d| {
                        d.iter_mut().zip(&ds).for_each(|(d, g)| *d += g)
                    });
                }
            }
            Op::Mse { pred, target } => {
                if self.needs(*pred) {
                    let pv = val(*pred).data();
                    let n = target.len() as f64;
                    add_into(&mut grads[*pred], pv.len(), |d| {
                        for ((d, p), t) in d.iter_mut().zip(pv).zip(target) {
                            *d += gy[0] * 2.0 * (p - t) / n;
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
impl Var {
    pub(crate) fn default_for_tests() -> Var {
        Var(0)
    }
}
