//! Bi-attention over the encoded sentence, a single-layer LSTM integrator
//! and the pooling strategies that reduce a padded sequence to one
//! fixed-size vector per example.

use std::str::FromStr;

use crate::encoder::AttentionMask;
use crate::error::{Result, TsaError};
use crate::numerics::{ParamBuilder, ParamId, ParamSet, Tape, Tensor, Var};

pub struct BiAttentionOutput {
    /// `[X; X − C; X ⊙ C]` projected back to `d_model`, `[B × T × d]`.
    pub fused: Var,
    /// `C = softmax(A) · X`, `[B × T × d]`.
    pub context: Var,
    /// `A = X Xᵀ`, `[B × T × T]`.
    pub affinity: Var,
    /// Row softmax of `A` over valid keys.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct BiAttentionParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl BiAttentionParams {
    pub fn build(b: &mut ParamBuilder, d_model: usize) -> Result<Self> {
        Ok(BiAttentionParams {
            w: b.xavier("fuse.proj.w", 3 * d_model, d_model)?,
            b: b.zeros("fuse.proj.b", &[d_model])?,
        })
    }
}

/// Bi-attention with both views bound to the same sequence.
pub fn biattention(
    tape: &mut Tape,
    params: &ParamSet,
    p: &BiAttentionParams,
    x: Var,
    mask: &AttentionMask,
) -> Result<BiAttentionOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.len() {
        return Err(TsaError::dim("biattention", &s, &[mask.batch(), mask.len()]));
    }
    let xt = tape.transpose(x)?;
    let affinity = tape.matmul(x, xt)?;
    let keys = mask.expand_keys(1);
    let weights = tape.softmax_masked(affinity, Some(&keys))?;
    let context = tape.matmul(weights, x)?;
    let diff = tape.sub(x, context)?;
    let prod = tape.mul(x, context)?;
    let features = tape.concat(&[x, diff, prod], 2)?;
    let w = tape.param(params, p.w);
    let b = tape.param(params, p.b);
    let fused = tape.matmul(features, w)?;
    let fused = tape.add(fused, b)?;
    Ok(BiAttentionOutput {
        fused,
        context,
        affinity,
        weights,
    })
}

/// Gate order in the packed weights is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn build(b: &mut ParamBuilder, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(LstmParams {
            w_ih: b.xavier("lstm.w_ih", d_in, 4 * hidden)?,
            w_hh: b.xavier("lstm.w_hh", hidden, 4 * hidden)?,
            bias: b.zeros("lstm.b", &[4 * hidden])?,
            hidden,
        })
    }
}

/// Unidirectional LSTM over `[B × T × d]`. At padded steps the previous
/// `(h, c)` is carried forward unchanged, so trailing padding cannot alter
/// any state at a valid step. Returns `[B × T × hidden]`.
pub fn lstm_integrate(
    tape: &mut Tape,
    params: &ParamSet,
    p: &LstmParams,
    f: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.len() {
        return Err(TsaError::dim("lstm_integrate", &s, &[mask.batch(), mask.len()]));
    }
    let (b, t, dh) = (s[0], s[1], p.hidden);
    let w_ih = tape.param(params, p.w_ih);
    let w_hh = tape.param(params, p.w_hh);
    let bias = tape.param(params, p.bias);
    let xw = tape.matmul(f, w_ih)?;
    let xw = tape.add(xw, bias)?;
    let mut h = tape.constant(Tensor::zeros(&[b, dh]));
    let mut c = tape.constant(Tensor::zeros(&[b, dh]));
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let keep: Vec<f64> = (0..b).map(|r| if mask.is_valid(r, step) { 1.0 } else { 0.0 }).collect();
        let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let keep = tape.constant(Tensor::new(vec![b, 1], keep)?);
        let hold = tape.constant(Tensor::new(vec![b, 1], hold)?);

        let x_t = tape.narrow(xw, 1, step, 1)?;
        let x_t = tape.reshape(x_t, &[b, 4 * dh])?;
        let hw = tape.matmul(h, w_hh)?;
        let gates = tape.add(x_t, hw)?;
        let i_g = tape.narrow(gates, 1, 0, dh)?;
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.narrow(gates, 1, dh, dh)?;
        let f_g = tape.sigmoid(f_g);
        let g_g = tape.narrow(gates, 1, 2 * dh, dh)?;
        let g_g = tape.tanh(g_g);
        let o_g = tape.narrow(gates, 1, 3 * dh, dh)?;
        let o_g = tape.sigmoid(o_g);

        let fc = tape.mul(f_g, c)?;
        let ig = tape.mul(i_g, g_g)?;
        let c_new = tape.add(fc, ig)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_g, c_act)?;

        c = freeze(tape, c_new, c, keep, hold)?;
        h = freeze(tape, h_new, h, keep, hold)?;
        outputs.push(tape.reshape(h, &[b, 1, dh])?);
    }
    tape.concat(&outputs, 1)
}

/// `keep · new + hold · old`; exact `new` where keep = 1, exact `old`
/// where keep = 0.
fn freeze(tape: &mut Tape, new: Var, old: Var, keep: Var, hold: Var) -> Result<Var> {
    let a = tape.mul(new, keep)?;
    let b = tape.mul(old, hold)?;
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub struct PoolParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl PoolParams {
    pub fn build(b: &mut ParamBuilder, d_h: usize) -> Result<Self> {
        Ok(PoolParams {
            w: b.xavier("pool.w", d_h, 1)?,
            b: b.zeros("pool.b", &[1])?,
        })
    }
}

pub struct PooledRepresentation {
    /// `[B × d_pool]`.
    pub vector: Var,
    /// `[B × T]` pooling weights; zero on padding.
    pub weights: Var,
}

/// `β = softmax_valid(H w + b)`, `vector = Σ_t β_t h_t`.
pub fn self_attentive_pool(
    tape: &mut Tape,
    params: &ParamSet,
    p: &PoolParams,
    h: Var,
    mask: &AttentionMask,
) -> Result<PooledRepresentation> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.len() {
        return Err(TsaError::dim("self_attentive_pool", &s, &[mask.batch(), mask.len()]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let w = tape.param(params, p.w);
    let bias = tape.param(params, p.b);
    let scores = tape.matmul(h, w)?;
    let scores = tape.add(scores, bias)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let weights = tape.softmax_masked(scores, Some(mask.valid()))?;
    let beta = tape.reshape(weights, &[b, 1, t])?;
    let pooled = tape.matmul(beta, h)?;
    let vector = tape.reshape(pooled, &[b, d])?;
    Ok(PooledRepresentation { vector, weights })
}

/// `[B × T]` weights of `1 / len` on valid positions, 0 on padding.
fn mean_weights(mask: &AttentionMask) -> Tensor {
    let lengths = mask.lengths();
    let data = (0..mask.batch())
        .flat_map(|b| {
            let inv = 1.0 / lengths[b] as f64;
            (0..mask.len()).map(move |t| (b, t, inv))
        })
        .map(|(b, t, inv)| if mask.is_valid(b, t) { inv } else { 0.0 })
        .collect();
    Tensor::new(vec![mask.batch(), mask.len()], data).expect("mask shape")
}

/// Mean over valid positions, `[B × T × d] -> [B × d]`.
pub fn global_average_pool(tape: &mut Tape, h: Var, mask: &AttentionMask) -> Result<Var> {
    Ok(mean_pool(tape, h, mask)?.vector)
}

fn mean_pool(tape: &mut Tape, h: Var, mask: &AttentionMask) -> Result<PooledRepresentation> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.len() {
        return Err(TsaError::dim("global_average_pool", &s, &[mask.batch(), mask.len()]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let weights = tape.constant(mean_weights(mask));
    let w3 = tape.reshape(weights, &[b, 1, t])?;
    let pooled = tape.matmul(w3, h)?;
    let vector = tape.reshape(pooled, &[b, d])?;
    Ok(PooledRepresentation { vector, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolStrategy {
    SelfAttentive,
    Mean,
    ConcatBoth,
}

impl PoolStrategy {
    pub fn uses_attention(self) -> bool {
        matches!(self, PoolStrategy::SelfAttentive | PoolStrategy::ConcatBoth)
    }

    pub fn output_dim(self, d_h: usize) -> usize {
        match self {
            PoolStrategy::ConcatBoth => 2 * d_h,
            _ => d_h,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolStrategy::SelfAttentive => "self_attentive",
            PoolStrategy::Mean => "mean",
            PoolStrategy::ConcatBoth => "concat_both",
        }
    }
}

impl FromStr for PoolStrategy {
    type Err = TsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attentive" => Ok(PoolStrategy::SelfAttentive),
            "mean" => Ok(PoolStrategy::Mean),
            "concat_both" => Ok(PoolStrategy::ConcatBoth),
            other => Err(TsaError::Config(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

/// Dispatches on `strategy`. `p` is required for the attentive variants.
/// For `ConcatBoth` the vector is `[attentive; mean]` and the exposed
/// weights are the attentive ones.
pub fn pool(
    tape: &mut Tape,
    params: &ParamSet,
    strategy: PoolStrategy,
    p: Option<&PoolParams>,
    h: Var,
    mask: &AttentionMask,
) -> Result<PooledRepresentation> {
    let need = || TsaError::Config(format!("{} pooling needs pool.w/pool.b", strategy.as_str()));
    match strategy {
        PoolStrategy::Mean => mean_pool(tape, h, mask),
        PoolStrategy::SelfAttentive => self_attentive_pool(tape, params, p.ok_or_else(need)?, h, mask),
        PoolStrategy::ConcatBoth => {
            let att = self_attentive_pool(tape, params, p.ok_or_else(need)?, h, mask)?;
            let mean = mean_pool(tape, h, mask)?;
            let vector = tape.concat(&[att.vector, mean.vector], 1)?;
            Ok(PooledRepresentation {
                vector,
                weights: att.weights,
            })
        }
    }
}
