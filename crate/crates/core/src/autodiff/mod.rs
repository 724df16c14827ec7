//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs for the backward sweep. Inputs always precede the node that
//! consumes them, so a single reverse pass over the node list is a valid
//! topological traversal.

pub mod gradcheck;
pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, PoolGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Pool2d {
        input: Var,
        geom: PoolGeom,
        argmax: Option<Vec<usize>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    ScaledSigmoid {
        input: Var,
        scale: f64,
    },
    ChannelScale {
        features: Var,
        weights: Var,
    },
    Add(Var, Var),
    Mul(Var, f64),
    Reshape(Var),
    MeanRows(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L1(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Only leaves with `requires_grad` (and nodes derived
    /// from them) take part in the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of an NCHW batch with `(out_ch, in_ch, k_h, k_w)`
    /// kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if self.shape(bias) != [ks[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![ks[0]],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let out_h = conv_out_extent(xs[2], ks[2], stride, padding)
            .ok_or_else(|| non_positive("conv2d", &xs, &ks))?;
        let out_w = conv_out_extent(xs[3], ks[3], stride, padding)
            .ok_or_else(|| non_positive("conv2d", &xs, &ks))?;
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ks[0],
            k_h: ks[2],
            k_w: ks[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(vec![geom.batch, geom.out_ch, out_h, out_w], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("pool2d", format!("expected NCHW input, got {xs:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pool2d", "window and stride must be positive"));
        }
        if window > xs[2] || window > xs[3] {
            return Err(Error::invalid(
                "pool2d",
                format!("window {window} larger than input {}x{}", xs[2], xs[3]),
            ));
        }
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            in_h: xs[2],
            in_w: xs[3],
            window,
            stride,
            out_h: (xs[2] - window) / stride + 1,
            out_w: (xs[3] - window) / stride + 1,
        };
        let x = self.value(input).data();
        let (out, argmax) = match kind {
            PoolKind::Max => {
                let (o, a) = kernels::max_pool_forward(x, &geom);
                (o, Some(a))
            }
            PoolKind::Avg => (kernels::avg_pool_forward(x, &geom), None),
        };
        let value = Tensor::new(vec![xs[0], xs[1], geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Pool2d {
                input,
                geom,
                argmax,
            },
            rg,
        ))
    }

    /// Affine map `input · weightᵀ + bias` with `weight` stored `(d_out, d_in)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![ws[0]],
            });
        }
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            xs[1],
            ws[0],
        );
        let value = Tensor::new(vec![xs[0], ws[0]], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| {
            let v = x.data()[i];
            // NaN passes through so divergence stays visible.
            if v < 0.0 {
                0.0
            } else {
                v
            }
        });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// Elementwise `1 / (1 + exp(-scale * x))`.
    pub fn scaled_sigmoid(&mut self, input: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(
                "scaled_sigmoid",
                format!("scale must be positive, got {scale}"),
            ));
        }
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| sigmoid(scale * x.data()[i]));
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ScaledSigmoid { input, scale }, rg))
    }

    /// Multiplies channel `j` of an NCHW map by `weights[j]`.
    pub fn channel_scale(&mut self, features: Var, weights: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let ws = self.shape(weights).to_vec();
        if fs.len() != 4 || ws != [fs[1]] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: fs,
                rhs: ws,
            });
        }
        let plane = fs[2] * fs[3];
        let ch = fs[1];
        let f = self.value(features).data();
        let w = self.value(weights).data();
        let value = Tensor::from_fn(&fs, |i| f[i] * w[(i / plane) % ch]);
        let rg = self.any_grad(&[features, weights]);
        Ok(self.push(value, Op::ChannelScale { features, weights }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(self.shape(a), |i| x[i] + y[i]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Multiplication by a constant.
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a).data();
        let value = Tensor::from_fn(self.shape(a), |i| x[i] * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mul(a, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rest: usize = s[1..].iter().product();
        let shape = [s[0], rest];
        self.reshape(a, &shape)
    }

    /// Mean over the leading (batch) axis of a 2-D tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("mean_rows", format!("expected 2-D input, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(a), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            loss += z.ln() + max - row[labels[r]];
        }
        loss /= batch as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of absolute values over all given tensors.
    pub fn l1_norm(&mut self, inputs: &[Var]) -> Var {
        let total = inputs
            .iter()
            .flat_map(|v| self.value(*v).data())
            .map(|x| x.abs())
            .sum();
        let rg = self.any_grad(inputs);
        self.push(Tensor::scalar(total), Op::L1(inputs.to_vec()), rg)
    }

    /// Accumulates `d loss / d v` for every node, in reverse tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = (needs(*input), needs(*kernel), needs(*bias));
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geom,
                    need,
                );
                if let Some(d) = cg.input {
                    accumulate(grads, *input, self.shape(*input), d);
                }
                if let Some(d) = cg.kernel {
                    accumulate(grads, *kernel, self.shape(*kernel), d);
                }
                if let Some(d) = cg.bias {
                    accumulate(grads, *bias, self.shape(*bias), d);
                }
            }
            Op::Pool2d {
                input,
                geom,
                argmax,
            } => {
                let d = match argmax {
                    Some(arg) => {
                        let mut dx = vec![0.0; self.value(*input).numel()];
                        for (&i, go) in arg.iter().zip(g.data()) {
                            dx[i] += go;
                        }
                        dx
                    }
                    None => kernels::avg_pool_backward(g.data(), geom),
                };
                accumulate(grads, *input, self.shape(*input), d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (batch, d_in) = (xs[0], xs[1]);
                let d_out = self.shape(*weight)[0];
                let go = g.data();
                if needs(*input) {
                    let mut dx = vec![0.0; batch * d_in];
                    kernels::gemm(
                        batch,
                        d_out,
                        d_in,
                        go,
                        (d_out, 1),
                        self.value(*weight).data(),
                        (d_in, 1),
                        0.0,
                        &mut dx,
                    );
                    accumulate(grads, *input, xs, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; d_out * d_in];
                    kernels::gemm(
                        d_out,
                        batch,
                        d_in,
                        go,
                        (1, d_out),
                        self.value(*input).data(),
                        (d_in, 1),
                        0.0,
                        &mut dw,
                    );
                    accumulate(grads, *weight, self.shape(*weight), dw);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d_out];
                    for r in 0..batch {
                        for (d, v) in db.iter_mut().zip(&go[r * d_out..(r + 1) * d_out]) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, &[d_out], db);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let d = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(go, &xi)| if xi > 0.0 { *go } else { 0.0 })
                    .collect();
                accumulate(grads, *input, self.shape(*input), d);
            }
            Op::ScaledSigmoid { input, scale } => {
                let y = node.value.data();
                let d = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(go, yi)| go * scale * yi * (1.0 - yi))
                    .collect();
                accumulate(grads, *input, self.shape(*input), d);
            }
            Op::ChannelScale { features, weights } => {
                let fs = self.shape(*features);
                let plane = fs[2] * fs[3];
                let ch = fs[1];
                let f = self.value(*features).data();
                let w = self.value(*weights).data();
                let go = g.data();
                if needs(*features) {
                    let d = go
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[(i / plane) % ch])
                        .collect();
                    accumulate(grads, *features, fs, d);
                }
                if needs(*weights) {
                    let mut dw = vec![0.0; ch];
                    for (i, (v, fi)) in go.iter().zip(f).enumerate() {
                        dw[(i / plane) % ch] += v * fi;
                    }
                    accumulate(grads, *weights, &[ch], dw);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::Mul(a, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, self.shape(*a), g.data().to_vec());
            }
            Op::MeanRows(a) => {
                let s = self.shape(*a);
                let rows = s[0] as f64;
                let d = (0..s[0] * s[1])
                    .map(|i| g.data()[i % s[1]] / rows)
                    .collect();
                accumulate(grads, *a, s, d);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let s = self.shape(*logits);
                let (batch, classes) = (s[0], s[1]);
                let scale = g.item() / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= scale;
                }
                accumulate(grads, *logits, s, d);
            }
            Op::L1(inputs) => {
                let go = g.item();
                for v in inputs {
                    if needs(*v) {
                        let d = self
                            .value(*v)
                            .data()
                            .iter()
                            .map(|x| go * sign(*x))
                            .collect();
                        accumulate(grads, *v, self.shape(*v), d);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get), but returns zeros shaped like `v` when no
    /// gradient reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape matches value"));
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logistic function clamped to `[ε/2, 1 − ε/2]` (ε the `f64` machine
/// epsilon): strictly inside (0, 1), and far enough from 0 that saturated
/// gradients never become subnormal, which slows arithmetic badly.
pub(crate) fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::EPSILON / 2.0, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn non_positive(op: &'static str, x: &[usize], k: &[usize]) -> Error {
    Error::invalid(
        op,
        format!("non-positive output extent for input {x:?} and kernel {k:?}"),
    )
}
