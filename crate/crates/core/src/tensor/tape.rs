//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value. `backward`
//! walks the nodes once, last to first, accumulating gradients into the
//! inputs of each node that depends on a trainable leaf.

use std::collections::BTreeMap;

use super::conv::{conv2d_backward, conv2d_forward_keep, Conv2dConfig, ConvGeometry};
use super::scalar::{gemm, Layout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization mode: batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Primitive operation kinds and their attributes.
///
/// Input conventions for [`Tape::apply`]:
/// - `Linear`: `[x (N×in), weight (out×in), bias (out)]`
/// - `Conv2d`: `[x, weight]` or `[x, weight, bias]`
/// - `BatchNorm` train: `[x, gamma, beta]`; eval: `[x, gamma, beta, running_mean, running_var]`
/// - binary ops: two inputs of identical shape; everything else: one input.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Linear,
    Conv2d(Conv2dConfig),
    Relu,
    Add,
    Sub,
    Mul,
    Scale(f64),
    GlobalAvgPool,
    BatchNorm { mode: Mode, eps: f64 },
    LogSoftmax { tau: f64 },
    Softmax { tau: f64 },
    Mean,
    Sum,
    Square,
    Abs,
    HuberUnit,
    UpsampleNearest(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::LogSoftmax { .. } => "log_softmax_temperature",
            OpKind::Softmax { .. } => "softmax_temperature",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::HuberUnit => "huber_unit",
            OpKind::UpsampleNearest(_) => "upsample_nearest",
        }
    }
}

/// Per-channel statistics of a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased (n − 1) variance, as used for running estimates.
    pub var: Vec<F>,
}

#[derive(Debug)]
enum Saved<F> {
    Nothing,
    Norm {
        mean: Vec<F>,
        inv_std: Vec<F>,
        unbiased_var: Vec<F>,
    },
    /// Geometry and, when the weight is trainable, the patch matrices.
    Conv(ConvGeometry, Option<Vec<F>>),
}

#[derive(Debug)]
struct Node<F> {
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    value: Tensor<F>,
    requires_grad: bool,
    name: Option<String>,
    saved: Saved<F>,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            kind: None,
            inputs: Vec::new(),
            value,
            requires_grad,
            name,
            saved: Saved::Nothing,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value no gradient flows into.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// Same values as `v`, severed from everything recorded before it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Statistics computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats<F>> {
        match &self.nodes[v.0].saved {
            Saved::Norm {
                mean,
                unbiased_var,
                ..
            } if matches!(
                self.nodes[v.0].kind,
                Some(OpKind::BatchNorm {
                    mode: Mode::Train,
                    ..
                })
            ) =>
            {
                Some(BatchStats {
                    mean: mean.clone(),
                    var: unbiased_var.clone(),
                })
            }
            _ => None,
        }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Linear, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        match b {
            Some(b) => self.apply(OpKind::Conv2d(cfg), &[x, w, b]),
            None => self.apply(OpKind::Conv2d(cfg), &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(
            OpKind::BatchNorm {
                mode: Mode::Train,
                eps: BN_EPS,
            },
            &[x, gamma, beta],
        )
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
    ) -> Result<Var> {
        self.apply(
            OpKind::BatchNorm {
                mode: Mode::Eval,
                eps: BN_EPS,
            },
            &[x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn log_softmax(&mut self, z: Var, tau: f64) -> Result<Var> {
        self.apply(OpKind::LogSoftmax { tau }, &[z])
    }

    pub fn softmax(&mut self, z: Var, tau: f64) -> Result<Var> {
        self.apply(OpKind::Softmax { tau }, &[z])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Abs, &[x])
    }

    pub fn huber_unit(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::HuberUnit, &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.apply(OpKind::UpsampleNearest(factor), &[x])
    }

    /// Evaluates one primitive and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            kind: Some(kind),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            name: None,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn arity(kind: &OpKind, inputs: &[Var]) -> Result<()> {
        let ok = match kind {
            OpKind::Linear => inputs.len() == 3,
            OpKind::Conv2d(_) => inputs.len() == 2 || inputs.len() == 3,
            OpKind::Add | OpKind::Sub | OpKind::Mul => inputs.len() == 2,
            OpKind::BatchNorm { mode: Mode::Train, .. } => inputs.len() == 3,
            OpKind::BatchNorm { mode: Mode::Eval, .. } => inputs.len() == 5,
            _ => inputs.len() == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                kind.name(),
                format!("unexpected input count {}", inputs.len()),
            ))
        }
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor<F>, Saved<F>)> {
        Self::arity(kind, inputs)?;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let op = kind.name();
        let out = match kind {
            OpKind::Linear => {
                let (x, w, b) = (val(0), val(1), val(2));
                let (xs, ws) = (x.shape(), w.shape());
                if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
                    return Err(Error::dim(
                        op,
                        format!("x {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
                    ));
                }
                let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
                let mut y = Vec::with_capacity(n * fan_out);
                for _ in 0..n {
                    y.extend_from_slice(b.data());
                }
                gemm(
                    n,
                    fan_in,
                    fan_out,
                    F::one(),
                    x.data(),
                    Layout::row_major(fan_in),
                    w.data(),
                    Layout::transposed(fan_in),
                    F::one(),
                    &mut y,
                    Layout::row_major(fan_out),
                );
                (Tensor::new(vec![n, fan_out], y)?, Saved::Nothing)
            }
            OpKind::Conv2d(cfg) => {
                let geo = ConvGeometry::resolve(val(0).shape(), val(1).shape(), *cfg)?;
                let bias = if inputs.len() == 3 {
                    let b = val(2);
                    if b.shape() != [geo.out_channels] {
                        return Err(Error::dim(op, format!("bias shape {:?}", b.shape())));
                    }
                    Some(b.data())
                } else {
                    None
                };
                let keep = self.nodes[inputs[1].0].requires_grad;
                let (y, cols) = conv2d_forward_keep(&geo, val(0).data(), val(1).data(), bias, keep);
                (
                    Tensor::new(geo.output_shape().to_vec(), y)?,
                    Saved::Conv(geo, cols),
                )
            }
            OpKind::Relu => (val(0).map(|v| v.max(F::zero())), Saved::Nothing),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(Error::dim(
                        op,
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| match kind {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                (Tensor::new(a.shape().to_vec(), data)?, Saved::Nothing)
            }
            OpKind::Scale(c) => {
                let c = F::from_f64(*c);
                (val(0).map(|v| v * c), Saved::Nothing)
            }
            OpKind::GlobalAvgPool => {
                let x = val(0);
                let s = x.shape();
                if s.len() != 4 {
                    return Err(Error::dim(op, format!("expected N×C×H×W, got {s:?}")));
                }
                let plane = s[2] * s[3];
                let inv = F::from_f64(1.0 / plane as f64);
                let data = x
                    .data()
                    .chunks(plane)
                    .map(|c| c.iter().copied().sum::<F>() * inv)
                    .collect();
                (Tensor::new(vec![s[0], s[1]], data)?, Saved::Nothing)
            }
            OpKind::BatchNorm { mode, eps } => self.batch_norm_forward(*mode, *eps, inputs)?,
            OpKind::LogSoftmax { tau } | OpKind::Softmax { tau } => {
                if !(*tau > 0.0) {
                    return Err(Error::Config(format!("temperature must be positive, got {tau}")));
                }
                let x = val(0);
                let classes = *x
                    .shape()
                    .last()
                    .ok_or_else(|| Error::dim(op, "scalar input has no class axis"))?;
                let inv_tau = F::from_f64(1.0 / tau);
                let mut out = Vec::with_capacity(x.len());
                for row in x.data().chunks(classes) {
                    let m = row
                        .iter()
                        .map(|&v| v * inv_tau)
                        .fold(F::neg_infinity(), F::max);
                    let lse = row
                        .iter()
                        .map(|&v| (v * inv_tau - m).exp())
                        .sum::<F>()
                        .ln();
                    for &v in row {
                        let ls = v * inv_tau - m - lse;
                        out.push(if matches!(kind, OpKind::Softmax { .. }) {
                            ls.exp()
                        } else {
                            ls
                        });
                    }
                }
                (Tensor::new(x.shape().to_vec(), out)?, Saved::Nothing)
            }
            OpKind::Mean => {
                let x = val(0);
                let s = x.data().iter().copied().sum::<F>() / F::from_f64(x.len() as f64);
                (Tensor::scalar(s), Saved::Nothing)
            }
            OpKind::Sum => (
                Tensor::scalar(val(0).data().iter().copied().sum::<F>()),
                Saved::Nothing,
            ),
            OpKind::Square => (val(0).map(|v| v * v), Saved::Nothing),
            OpKind::Abs => (val(0).map(|v| v.abs()), Saved::Nothing),
            OpKind::HuberUnit => (val(0).map(huber), Saved::Nothing),
            OpKind::UpsampleNearest(f) => {
                let f = *f;
                let x = val(0);
                let s = x.shape();
                if s.len() != 4 || f == 0 {
                    return Err(Error::dim(op, format!("input {s:?}, factor {f}")));
                }
                let (h, w) = (s[2], s[3]);
                let mut out = Vec::with_capacity(x.len() * f * f);
                for plane in x.data().chunks(h * w) {
                    for y in 0..h * f {
                        let row = &plane[(y / f) * w..][..w];
                        for xx in 0..w * f {
                            out.push(row[xx / f]);
                        }
                    }
                }
                (
                    Tensor::new(vec![s[0], s[1], h * f, w * f], out)?,
                    Saved::Nothing,
                )
            }
        };
        Ok(out)
    }

    fn batch_norm_forward(
        &self,
        mode: Mode,
        eps: f64,
        inputs: &[Var],
    ) -> Result<(Tensor<F>, Saved<F>)> {
        let x = &self.nodes[inputs[0].0].value;
        let gamma = self.nodes[inputs[1].0].value.data();
        let beta = self.nodes[inputs[2].0].value.data();
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input {s:?} has no channel axis")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let extra = match mode {
            Mode::Train => 0,
            Mode::Eval => 2,
        };
        for k in 1..3 + extra {
            let got = self.nodes[inputs[k].0].value.shape();
            if got != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("per-channel input {k} has shape {got:?}, expected [{c}]"),
                ));
            }
        }
        let count = (n * spatial) as f64;
        let eps = F::from_f64(eps);
        let (mean, unbiased_var, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut acc = F::zero();
                    for i in 0..n {
                        acc = acc + x.data()[(i * c + ch) * spatial..][..spatial].iter().copied().sum::<F>();
                    }
                    mean[ch] = acc / F::from_f64(count);
                    let mut sq = F::zero();
                    for i in 0..n {
                        for &v in &x.data()[(i * c + ch) * spatial..][..spatial] {
                            let d = v - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / F::from_f64(count);
                }
                let unbiased: Vec<F> = if count > 1.0 {
                    var.iter()
                        .map(|&v| v * F::from_f64(count / (count - 1.0)))
                        .collect()
                } else {
                    var.clone()
                };
                let inv: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                (mean, unbiased, inv)
            }
            Mode::Eval => {
                let rm = self.nodes[inputs[3].0].value.data().to_vec();
                let rv = self.nodes[inputs[4].0].value.data();
                let inv = rv.iter().map(|&v| (v + eps).sqrt().recip()).collect();
                (rm, rv.to_vec(), inv)
            }
        };
        let mut out = vec![F::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for (o, &v) in out[off..off + spatial]
                    .iter_mut()
                    .zip(&x.data()[off..off + spatial])
                {
                    *o = g * ((v - m) * is) + b;
                }
            }
        }
        Ok((
            Tensor::new(s.to_vec(), out)?,
            Saved::Norm {
                mean,
                inv_std,
                unbiased_var,
            },
        ))
    }

    /// Input gradients of node `idx` given its output gradient.
    fn backward_node(&self, idx: usize, dy: &[F]) -> Vec<Option<Vec<F>>> {
        let node = &self.nodes[idx];
        let kind = node.kind.as_ref().expect("leaf nodes have no backward");
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; node.inputs.len()];
        match kind {
            OpKind::Linear => {
                let (x, w) = (val(0), val(1));
                let (n, fan_in, fan_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if needs(0) {
                    let mut dx = vec![F::zero(); n * fan_in];
                    gemm(
                        n,
                        fan_out,
                        fan_in,
                        F::one(),
                        dy,
                        Layout::row_major(fan_out),
                        w.data(),
                        Layout::row_major(fan_in),
                        F::zero(),
                        &mut dx,
                        Layout::row_major(fan_in),
                    );
                    grads[0] = Some(dx);
                }
                if needs(1) {
                    let mut dw = vec![F::zero(); fan_out * fan_in];
                    gemm(
                        fan_out,
                        n,
                        fan_in,
                        F::one(),
                        dy,
                        Layout::transposed(fan_out),
                        x.data(),
                        Layout::row_major(fan_in),
                        F::zero(),
                        &mut dw,
                        Layout::row_major(fan_in),
                    );
                    grads[1] = Some(dw);
                }
                if needs(2) {
                    let mut db = vec![F::zero(); fan_out];
                    for row in dy.chunks(fan_out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    grads[2] = Some(db);
                }
            }
            OpKind::Conv2d(_) => {
                let Saved::Conv(geo, cols) = &node.saved else {
                    unreachable!("conv node without geometry")
                };
                let wants_weight = needs(1) || (node.inputs.len() == 3 && needs(2));
                if needs(0) || wants_weight {
                    let (dx, dw, db) =
                        conv2d_backward(geo, val(0).data(), val(1).data(), dy, needs(0), cols.as_deref());
                    grads[0] = dx;
                    if needs(1) {
                        grads[1] = Some(dw);
                    }
                    if node.inputs.len() == 3 && needs(2) {
                        grads[2] = Some(db);
                    }
                }
            }
            OpKind::Relu => {
                grads[0] = Some(
                    val(0)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
                        .collect(),
                );
            }
            OpKind::Add => {
                grads[0] = needs(0).then(|| dy.to_vec());
                grads[1] = needs(1).then(|| dy.to_vec());
            }
            OpKind::Sub => {
                grads[0] = needs(0).then(|| dy.to_vec());
                grads[1] = needs(1).then(|| dy.iter().map(|&g| -g).collect());
            }
            OpKind::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                grads[0] = needs(0).then(|| dy.iter().zip(b).map(|(&g, &v)| g * v).collect());
                grads[1] = needs(1).then(|| dy.iter().zip(a).map(|(&g, &v)| g * v).collect());
            }
            OpKind::Scale(c) => {
                let c = F::from_f64(*c);
                grads[0] = Some(dy.iter().map(|&g| g * c).collect());
            }
            OpKind::GlobalAvgPool => {
                let s = val(0).shape();
                let plane = s[2] * s[3];
                let inv = F::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(val(0).len());
                for &g in dy {
                    dx.extend(std::iter::repeat(g * inv).take(plane));
                }
                grads[0] = Some(dx);
            }
            OpKind::BatchNorm { mode, .. } => {
                let Saved::Norm { mean, inv_std, .. } = &node.saved else {
                    unreachable!("batch norm node without statistics")
                };
                let x = val(0);
                let gamma = val(1).data();
                let s = x.shape();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let count = F::from_f64((n * spatial) as f64);
                let mut dx = vec![F::zero(); x.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = F::zero();
                    let mut sum_dy_xhat = F::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        for (&g, &v) in dy[off..off + spatial].iter().zip(&x.data()[off..off + spatial]) {
                            sum_dy = sum_dy + g;
                            sum_dy_xhat = sum_dy_xhat + g * (v - m) * is;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = gamma[ch] * is;
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        for k in off..off + spatial {
                            dx[k] = match mode {
                                Mode::Eval => dy[k] * scale,
                                Mode::Train => {
                                    let xhat = (x.data()[k] - m) * is;
                                    scale / count
                                        * (count * dy[k] - sum_dy - xhat * sum_dy_xhat)
                                }
                            };
                        }
                    }
                }
                grads[0] = needs(0).then_some(dx);
                grads[1] = needs(1).then_some(dgamma);
                grads[2] = needs(2).then_some(dbeta);
            }
            OpKind::LogSoftmax { tau } | OpKind::Softmax { tau } => {
                let inv_tau = F::from_f64(1.0 / tau);
                let y = node.value.data();
                let classes = *node.value.shape().last().expect("class axis");
                let mut dz = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(classes).zip(dy.chunks(classes)) {
                    if matches!(kind, OpKind::LogSoftmax { .. }) {
                        let total: F = gr.iter().copied().sum();
                        for (&ly, &g) in yr.iter().zip(gr) {
                            dz.push((g - ly.exp() * total) * inv_tau);
                        }
                    } else {
                        let dot: F = yr.iter().zip(gr).map(|(&s, &g)| s * g).sum();
                        for (&s, &g) in yr.iter().zip(gr) {
                            dz.push(s * (g - dot) * inv_tau);
                        }
                    }
                }
                grads[0] = Some(dz);
            }
            OpKind::Mean => {
                let n = val(0).len();
                grads[0] = Some(vec![dy[0] / F::from_f64(n as f64); n]);
            }
            OpKind::Sum => grads[0] = Some(vec![dy[0]; val(0).len()]),
            OpKind::Square => {
                let two = F::from_f64(2.0);
                grads[0] = Some(val(0).data().iter().zip(dy).map(|(&x, &g)| two * x * g).collect());
            }
            OpKind::Abs => {
                grads[0] = Some(
                    val(0)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| g * sign(x))
                        .collect(),
                );
            }
            OpKind::HuberUnit => {
                grads[0] = Some(
                    val(0)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&d, &g)| if d.abs() < F::one() { g * d } else { g * sign(d) })
                        .collect(),
                );
            }
            OpKind::UpsampleNearest(f) => {
                let f = *f;
                let s = val(0).shape();
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![F::zero(); val(0).len()];
                for (p, plane) in dy.chunks(h * f * w * f).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h * f {
                        for xx in 0..w * f {
                            let k = (y / f) * w + xx / f;
                            dst[k] = dst[k] + plane[y * w * f + xx];
                        }
                    }
                }
                grads[0] = Some(dx);
            }
        }
        grads
    }

    /// Propagates the gradient of a scalar `loss` to every trainable leaf,
    /// consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        let mut leaves = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.kind.is_none() {
                if node.requires_grad {
                    leaves.push(idx);
                }
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.backward_node(idx, &dy);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // leaves recorded after the loss cannot influence it
        for idx in loss.0 + 1..self.nodes.len() {
            if self.nodes[idx].kind.is_none() && self.nodes[idx].requires_grad {
                leaves.push(idx);
            }
        }
        leaves.sort_unstable();
        let mut entries = Vec::with_capacity(leaves.len());
        let mut nodes = self.nodes;
        for idx in leaves {
            let node = std::mem::take(&mut nodes[idx].name);
            let shape = nodes[idx].value.shape().to_vec();
            let (data, reached) = match grads[idx].take() {
                Some(g) => (g, true),
                None => (vec![F::zero(); nodes[idx].value.len()], false),
            };
            entries.push(LeafGrad {
                var: Var(idx),
                name: node,
                grad: Tensor::new(shape, data)?,
                reached,
            });
        }
        Ok(Gradients { entries })
    }
}

fn sign<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn huber<F: Scalar>(d: F) -> F {
    let a = d.abs();
    if a < F::one() {
        F::from_f64(0.5) * d * d
    } else {
        a - F::from_f64(0.5)
    }
}

#[derive(Debug, Clone)]
pub struct LeafGrad<F> {
    pub var: Var,
    pub name: Option<String>,
    pub grad: Tensor<F>,
    /// False when no path connects the leaf to the loss.
    pub reached: bool,
}

/// Gradients of every trainable leaf of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    entries: Vec<LeafGrad<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.entries.iter().find(|e| e.var == v).map(|e| &e.grad)
    }

    /// Gradient for `name`, summed over every leaf registered under it.
    pub fn get(&self, name: &str) -> Option<Tensor<F>> {
        self.by_name().remove(name).map(|(g, _)| g)
    }

    pub fn entries(&self) -> &[LeafGrad<F>] {
        &self.entries
    }

    /// Named gradients with reachability, summing leaves that share a name.
    pub fn by_name(&self) -> BTreeMap<String, (Tensor<F>, bool)> {
        let mut out: BTreeMap<String, (Tensor<F>, bool)> = BTreeMap::new();
        for e in &self.entries {
            let Some(name) = &e.name else { continue };
            match out.get_mut(name) {
                Some((acc, reached)) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(e.grad.data()) {
                        *a = *a + v;
                    }
                    *reached |= e.reached;
                }
                None => {
                    out.insert(name.clone(), (e.grad.clone(), e.reached));
                }
            }
        }
        out
    }
}
