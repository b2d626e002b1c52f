//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended, so
//! the node list is already in topological order and a single reverse
//! sweep visits each node once.

use std::collections::HashMap;

use super::params::{ParamId, ParamSet};
use super::rng::Rng;
use super::tensor::{broadcast_index, broadcast_shapes, strides, Tensor};
use crate::error::{Result, TsaError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward-rule corruption, used to prove that the gradient
/// checker catches broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the tanh backward rule by 1.5.
    TanhBackward,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        ia: Option<Vec<usize>>,
        ib: Option<Vec<usize>>,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        a_off: Vec<usize>,
        b_off: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    /// out[o] = a[src[o]]
    Gather {
        a: Var,
        src: Vec<usize>,
    },
    /// out[dst[i]] += a[i]
    ScatterAdd {
        a: Var,
        dst: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    SumAll(Var),
    SmoothedCe {
        logits: Var,
        probs: Vec<f64>,
        target: Vec<f64>,
        batch: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<Fault>,
}

/// Result of a backward sweep: the gradient of the loss for every node
/// that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
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

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient but is not a parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| TsaError::dim(name, &sa, &sb))?;
        let ia = (sa != out_shape).then(|| broadcast_index(&sa, &out_shape));
        let ib = (sb != out_shape).then(|| broadcast_index(&sb, &out_shape));
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = (0..numel)
            .map(|o| {
                let x = da[ia.as_ref().map_or(o, |m| m[o])];
                let y = db[ib.as_ref().map_or(o, |m| m[o])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, ia, ib }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// Batched matrix product `[.. × M × K] · [.. × K × N]`; leading batch
    /// extents broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TsaError::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TsaError::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(ba, bb).ok_or_else(|| TsaError::dim("matmul", &sa, &sb))?;
        let a_off: Vec<usize> = broadcast_index(ba, &batch)
            .into_iter()
            .map(|i| i * m * k)
            .collect();
        let b_off: Vec<usize> = broadcast_index(bb, &batch)
            .into_iter()
            .map(|i| i * k * n)
            .collect();
        let nb = a_off.len();
        let mut out = vec![0.0; nb * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..nb {
            let am = &da[a_off[bi]..a_off[bi] + m * k];
            let bm = &db[b_off[bi]..b_off[bi] + k * n];
            let cm = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = am[i * k + p];
                    let brow = &bm[p * n..(p + 1) * n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_off,
                b_off,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Sign pattern of every ReLU input on the tape, in recording order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// each ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis. Masked entries (`false`) get weight
    /// exactly 0 and do not take part in the max or the normaliser; `mask`
    /// must have one entry per element of `x`.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(TsaError::dim("softmax_masked", &shape, &[m.len()]));
            }
        }
        let n = *shape.last().unwrap_or(&1);
        let rows = t.numel() / n.max(1);
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let xs = &t.data()[r * n..(r + 1) * n];
            let valid = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| valid(j))
                .map(|j| xs[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TsaError::InvalidMask { row: r });
            }
            let ys = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if valid(j) {
                    ys[j] = (xs[j] - max).exp();
                    sum += ys[j];
                }
            }
            ys.iter_mut().for_each(|y| *y /= sum);
        }
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Standardises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TsaError::dim("layer_norm", &shape, self.shape(gain)));
        }
        let t = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let xs = &t[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, src: Vec<usize>) -> Var {
        let d = self.value(a).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(shape, data).expect("gather shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather { a, src }, rg)
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TsaError::dim("permute", &in_shape, perm));
        }
        let in_strides = strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let numel: usize = out_shape.iter().product();
        let mut src = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..numel {
            src.push(flat);
            for d in (0..rank).rev() {
                counter[d] += 1;
                flat += eff[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                flat -= eff[d] * counter[d];
                counter[d] = 0;
            }
        }
        Ok(self.gather(a, out_shape, src))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TsaError::dim("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TsaError::dim("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            for i in start..start + len {
                src.extend(base + i * inner..base + (i + 1) * inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(a, out_shape, src))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| TsaError::dim("concat", &[], &[]))?).to_vec();
        if axis >= first.len() {
            return Err(TsaError::dim("concat", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TsaError::dim("concat", &first, s));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// `[.. × T × (2k+1)] -> [.. × T × T]`, picking entry `rel(i, j)` of
    /// row `i` for column `j`.
    pub fn relative_gather(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = 2 * k + 1;
        if shape.len() < 2 || shape[shape.len() - 1] != r {
            return Err(TsaError::dim("relative_gather", &shape, &[r]));
        }
        let t = shape[shape.len() - 2];
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let mut src = Vec::with_capacity(outer * t * t);
        for o in 0..outer {
            for i in 0..t {
                for j in 0..t {
                    src.push(o * t * r + i * r + relative_index(i, j, k));
                }
            }
        }
        let mut out_shape = shape;
        let last = out_shape.len() - 1;
        out_shape[last] = t;
        Ok(self.gather(a, out_shape, src))
    }

    /// `[.. × T × T] -> [.. × T × (2k+1)]`, summing row `i`'s entries into
    /// the bucket `rel(i, j)`. Adjoint of [`Tape::relative_gather`].
    pub fn relative_scatter(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape.len();
        if n < 2 || shape[n - 1] != shape[n - 2] {
            return Err(TsaError::dim("relative_scatter", &shape, &[]));
        }
        let t = shape[n - 1];
        let r = 2 * k + 1;
        let outer: usize = shape[..n - 2].iter().product();
        let mut dst = Vec::with_capacity(outer * t * t);
        for o in 0..outer {
            for i in 0..t {
                for j in 0..t {
                    dst.push(o * t * r + i * r + relative_index(i, j, k));
                }
            }
        }
        let mut out = vec![0.0; outer * t * r];
        for (x, &d) in self.value(a).data().iter().zip(&dst) {
            out[d] += x;
        }
        let mut out_shape = shape;
        out_shape[n - 1] = r;
        let rg = self.rg(a);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::ScatterAdd { a, dst }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Mean over the batch of the cross-entropy between `softmax(logits)`
    /// and the smoothed target `(1 - eps)·onehot + eps / C`.
    pub fn label_smoothed_ce(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TsaError::dim("label_smoothed_ce", &shape, &[labels.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(TsaError::Config(format!("label smoothing {eps} outside [0, 1)")));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TsaError::Data(format!("label index {bad} out of range for {c} classes")));
        }
        let target = smoothed_targets(labels, c, eps);
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                loss -= target[r * c + j] * logp;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SmoothedCe {
                logits,
                probs,
                target,
                batch: b,
            },
            rg,
        ))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TsaError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TsaError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter gradient into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                params.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let at = |m: &Option<Vec<usize>>, o: usize| m.as_ref().map_or(o, |m| m[o]);
                acc(*a, &|ga| {
                    for (o, &go) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => go,
                            BinaryKind::Mul => go * db[at(ib, o)],
                        };
                        ga[at(ia, o)] += d;
                    }
                });
                acc(*b, &|gb| {
                    for (o, &go) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => go,
                            BinaryKind::Sub => -go,
                            BinaryKind::Mul => go * da[at(ia, o)],
                        };
                        gb[at(ib, o)] += d;
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &|ga| {
                ga.iter_mut().zip(g).for_each(|(x, go)| *x += go * c);
            }),
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_off,
                b_off,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                acc(*a, &|ga| {
                    for bi in 0..a_off.len() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &db[b_off[bi]..b_off[bi] + k * n];
                        let gam = &mut ga[a_off[bi]..a_off[bi] + m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let s: f64 = gc[i * n..(i + 1) * n]
                                    .iter()
                                    .zip(&bm[p * n..(p + 1) * n])
                                    .map(|(x, y)| x * y)
                                    .sum();
                                gam[i * k + p] += s;
                            }
                        }
                    }
                });
                acc(*b, &|gb| {
                    for bi in 0..b_off.len() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &da[a_off[bi]..a_off[bi] + m * k];
                        let gbm = &mut gb[b_off[bi]..b_off[bi] + k * n];
                        for i in 0..m {
                            let gcrow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = am[i * k + p];
                                for (x, y) in gbm[p * n..(p + 1) * n].iter_mut().zip(gcrow) {
                                    *x += av * y;
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let factor = if self.fault == Some(Fault::TanhBackward) { 1.5 } else { 1.0 };
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += factor * g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|ga| {
                    for r in 0..out.len() / n {
                        let ys = &out[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / d;
                acc(*x, &|gx| {
                    for r in 0..rows {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = (0..d).map(|j| gy[j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &|gg| {
                    for (i, (go, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += go * xh;
                    }
                });
                acc(*bias, &|gb| {
                    for (i, go) in g.iter().enumerate() {
                        gb[i % d] += go;
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|ga| {
                ga.iter_mut().zip(g).for_each(|(x, go)| *x += go);
            }),
            Op::Gather { a, src } => acc(*a, &|ga| {
                for (go, &s) in g.iter().zip(src) {
                    ga[s] += go;
                }
            }),
            Op::ScatterAdd { a, dst } => acc(*a, &|ga| {
                for (x, &d) in ga.iter_mut().zip(dst) {
                    *x += g[d];
                }
            }),
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &|gv| {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + w];
                            gv[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, s)| *x += s);
                        }
                    });
                    start += w;
                }
            }
            Op::SumAll(a) => acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SmoothedCe {
                logits,
                probs,
                target,
                batch,
            } => {
                let scale = g[0] / *batch as f64;
                acc(*logits, &|gl| {
                    for i in 0..gl.len() {
                        gl[i] += scale * (probs[i] - target[i]);
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row index of the relative-position table for query `i`, key `j`:
/// `clip(j - i, -k, k) + k`.
pub fn relative_index(i: usize, j: usize, k: usize) -> usize {
    let offset = j as i64 - i as i64;
    let k = k as i64;
    (offset.clamp(-k, k) + k) as usize
}

/// Smoothed targets `(1 - eps)·onehot + eps / C`, row-major `[B × C]`.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        t[r * classes + l] += 1.0 - eps;
    }
    t
}
