//! Transformer encoder: multi-head self-attention with relative position
//! representations on both the key and value side, a position-wise FFN,
//! and post-norm residual blocks. Every step is mask-aware.

use crate::error::{Result, TsaError};
use crate::numerics::{Mode, ParamBuilder, ParamId, ParamSet, Rng, Tape, Tensor, Var};

pub use crate::numerics::relative_index;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Learned clipped relative offsets in attention (default).
    Relative,
    /// Sinusoidal absolute encodings added to the input; ablation only.
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub k_clip: usize,
    pub p_attn: f64,
    pub p_res: f64,
    pub ln_eps: f64,
    pub position: PositionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 128,
            d_ff: 256,
            k_clip: 10,
            p_attn: 0.1,
            p_res: 0.2,
            ln_eps: 1e-6,
            position: PositionMode::Relative,
        }
    }
}

impl EncoderConfig {
    pub fn d_z(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(TsaError::Config("num_layers must be at least 1".into()));
        }
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(TsaError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(TsaError::Config("d_ff must be positive".into()));
        }
        for (name, p) in [("p_attn", self.p_attn), ("p_res", self.p_res)] {
            if !(0.0..1.0).contains(&p) {
                return Err(TsaError::Config(format!("{name}={p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-row validity of a padded batch, `[B × T]`. Every row has at least
/// one valid position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(TsaError::dim("attention_mask", &[batch, len], &[valid.len()]));
        }
        for b in 0..batch {
            if !valid[b * len..(b + 1) * len].iter().any(|&v| v) {
                return Err(TsaError::InvalidMask { row: b });
            }
        }
        Ok(AttentionMask { batch, len, valid })
    }

    /// Prefix mask: row `b` is valid on `[0, lengths[b])`.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |t| t < l))
            .collect();
        Self::new(lengths.len(), len, valid)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.len + t]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| self.valid[b * self.len..(b + 1) * self.len].iter().filter(|&&v| v).count())
            .collect()
    }

    /// Key mask broadcast to `[B × groups × T × T]`: entry `(b, ·, i, j)`
    /// is the validity of key `j`.
    pub fn expand_keys(&self, groups: usize) -> Vec<bool> {
        let t = self.len;
        let mut out = Vec::with_capacity(self.batch * groups * t * t);
        for b in 0..self.batch {
            let row = &self.valid[b * t..(b + 1) * t];
            for _ in 0..groups * t {
                out.extend_from_slice(row);
            }
        }
        out
    }

    /// `[B × T × 1]` tensor with 1.0 on valid positions and 0.0 on padding.
    pub fn as_column(&self) -> Tensor {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.batch, self.len, 1], data).expect("mask shape")
    }
}

/// Relative position tables bound on a tape: `key` and `value` are both
/// `[(2k+1) × d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct Rpr {
    pub key: Var,
    pub value: Var,
    pub k_clip: usize,
}

/// `m_ij = q_i · (k_j + aK[rel(i, j)]) / √d_z` for `Q, K: [B × h × T × d_z]`.
/// No masking is applied here.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var, rpr: Option<&Rpr>) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    if sq.len() != 4 || tape.shape(k) != sq.as_slice() {
        return Err(TsaError::dim("attention_scores", &sq, tape.shape(k)));
    }
    let d_z = sq[3];
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if let Some(rpr) = rpr {
        let r = 2 * rpr.k_clip + 1;
        if tape.shape(rpr.key) != [r, d_z] {
            return Err(TsaError::dim("attention_scores", &[r, d_z], tape.shape(rpr.key)));
        }
        let akt = tape.transpose(rpr.key)?;
        let qa = tape.matmul(q, akt)?;
        let rel = tape.relative_gather(qa, rpr.k_clip)?;
        scores = tape.add(scores, rel)?;
    }
    Ok(tape.scale(scores, 1.0 / (d_z as f64).sqrt()))
}

/// Row softmax of `[B × h × T × T]` scores over valid keys, then attention
/// dropout in train mode.
pub fn attention_weights(
    tape: &mut Tape,
    scores: Var,
    mask: &AttentionMask,
    p_attn: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 4 || s[0] != mask.batch() || s[2] != mask.len() || s[3] != mask.len() {
        return Err(TsaError::dim("attention_weights", &s, &[mask.batch(), mask.len()]));
    }
    let keys = mask.expand_keys(s[1]);
    let alpha = tape.softmax_masked(scores, Some(&keys))?;
    tape.dropout(alpha, p_attn, mode, rng)
}

/// `z_i = Σ_j α_ij (v_j + aV[rel(i, j)])`.
pub fn attention_values(tape: &mut Tape, alpha: Var, v: Var, rpr: Option<&Rpr>) -> Result<Var> {
    let sa = tape.shape(alpha).to_vec();
    let sv = tape.shape(v).to_vec();
    if sa.len() != 4 || sv.len() != 4 || sa[..3] != sv[..3] || sa[3] != sv[2] {
        return Err(TsaError::dim("attention_values", &sa, &sv));
    }
    let mut z = tape.matmul(alpha, v)?;
    if let Some(rpr) = rpr {
        let r = 2 * rpr.k_clip + 1;
        if tape.shape(rpr.value) != [r, sv[3]] {
            return Err(TsaError::dim("attention_values", &[r, sv[3]], tape.shape(rpr.value)));
        }
        let buckets = tape.relative_scatter(alpha, rpr.k_clip)?;
        let rel = tape.matmul(buckets, rpr.value)?;
        z = tape.add(z, rel)?;
    }
    Ok(z)
}

/// `FFN(x) = max(0, x W1 + b1) W2 + b2`, applied position-wise.
pub fn ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, w2)?;
    tape.add(y, b2)
}

/// `[T × d]` sinusoidal position table.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn build(b: &mut ParamBuilder, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(FfnParams {
            w1: b.xavier(&format!("{prefix}.w1"), d_in, d_hidden)?,
            b1: b.zeros(&format!("{prefix}.b1"), &[d_hidden])?,
            w2: b.xavier(&format!("{prefix}.w2"), d_hidden, d_out)?,
            b2: b.zeros(&format!("{prefix}.b2"), &[d_out])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = [self.w1, self.b1, self.w2, self.b2].map(|id| tape.param(params, id));
        ffn(tape, x, w1, b1, w2, b2)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn: FfnParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct RelativePositionTable {
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayerParams>,
    pub rpr: Option<RelativePositionTable>,
}

impl Encoder {
    /// Registers (or binds) parameters under `enc.layer{i}.*` and `enc.rpr.*`.
    pub fn build(config: &EncoderConfig, b: &mut ParamBuilder) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("enc.layer{i}");
            let attn = AttentionParams {
                wq: b.xavier(&format!("{p}.attn.wq"), d, d)?,
                wk: b.xavier(&format!("{p}.attn.wk"), d, d)?,
                wv: b.xavier(&format!("{p}.attn.wv"), d, d)?,
                wo: b.xavier(&format!("{p}.attn.wo"), d, d)?,
                bo: b.zeros(&format!("{p}.attn.bo"), &[d])?,
            };
            layers.push(EncoderLayerParams {
                attn,
                ln1_gain: b.full(&format!("{p}.ln1.gain"), &[d], 1.0)?,
                ln1_bias: b.zeros(&format!("{p}.ln1.bias"), &[d])?,
                ffn: FfnParams::build(b, &format!("{p}.ffn"), d, config.d_ff, d)?,
                ln2_gain: b.full(&format!("{p}.ln2.gain"), &[d], 1.0)?,
                ln2_bias: b.zeros(&format!("{p}.ln2.bias"), &[d])?,
            });
        }
        let rpr = match config.position {
            PositionMode::Relative => {
                let rows = 2 * config.k_clip + 1;
                let std = (config.d_z() as f64).powf(-0.5);
                Some(RelativePositionTable {
                    key: b.normal("enc.rpr.aK", &[rows, config.d_z()], std)?,
                    value: b.normal("enc.rpr.aV", &[rows, config.d_z()], std)?,
                })
            }
            PositionMode::Sinusoidal => None,
        };
        Ok(Encoder {
            config: config.clone(),
            layers,
            rpr,
        })
    }

    fn bind_rpr(&self, tape: &mut Tape, params: &ParamSet) -> Option<Rpr> {
        self.rpr.as_ref().map(|t| Rpr {
            key: tape.param(params, t.key),
            value: tape.param(params, t.value),
            k_clip: self.config.k_clip,
        })
    }

    /// Multi-head self-attention of layer `layer` over `x: [B × T × d_model]`.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        layer: usize,
        x: Var,
        mask: &AttentionMask,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let rpr = self.bind_rpr(tape, params);
        multi_head_self_attention(
            tape,
            params,
            &self.layers[layer].attn,
            &self.config,
            x,
            mask,
            rpr.as_ref(),
            mode,
            rng,
        )
    }

    /// Post-norm block: `LN(x + drop(MHSA(x)))`, then `LN(x1 + drop(FFN(x1)))`.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        layer: usize,
        x: Var,
        mask: &AttentionMask,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let lp = &self.layers[layer];
        let eps = self.config.ln_eps;
        let a = self.self_attention(tape, params, layer, x, mask, mode, rng)?;
        let a = tape.dropout(a, self.config.p_res, mode, rng)?;
        let r = tape.add(x, a)?;
        let (g1, b1) = (tape.param(params, lp.ln1_gain), tape.param(params, lp.ln1_bias));
        let x1 = tape.layer_norm(r, g1, b1, eps)?;
        let f = lp.ffn.forward(tape, params, x1)?;
        let f = tape.dropout(f, self.config.p_res, mode, rng)?;
        let r = tape.add(x1, f)?;
        let (g2, b2) = (tape.param(params, lp.ln2_gain), tape.param(params, lp.ln2_bias));
        tape.layer_norm(r, g2, b2, eps)
    }

    /// All layers in sequence.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        mask: &AttentionMask,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(TsaError::Config(format!(
                "encoder expects [B × T × {}] input, got {:?}",
                self.config.d_model, s
            )));
        }
        let mut h = x;
        for layer in 0..self.layers.len() {
            h = self.layer_forward(tape, params, layer, h, mask, mode, rng)?;
        }
        Ok(h)
    }
}

/// Projects to per-head Q, K, V, attends, concatenates heads and applies
/// the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_self_attention(
    tape: &mut Tape,
    params: &ParamSet,
    p: &AttentionParams,
    config: &EncoderConfig,
    x: Var,
    mask: &AttentionMask,
    rpr: Option<&Rpr>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != config.d_model {
        return Err(TsaError::dim("multi_head_self_attention", &s, &[config.d_model]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let (h, d_z) = (config.num_heads, config.d_z());
    let mut split = |w: ParamId| -> Result<Var> {
        let wv = tape.param(params, w);
        let y = tape.matmul(x, wv)?;
        let y = tape.reshape(y, &[b, t, h, d_z])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(p.wq)?;
    let k = split(p.wk)?;
    let v = split(p.wv)?;
    let scores = attention_scores(tape, q, k, rpr)?;
    let alpha = attention_weights(tape, scores, mask, config.p_attn, mode, rng)?;
    let z = attention_values(tape, alpha, v, rpr)?;
    let z = tape.permute(z, &[0, 2, 1, 3])?;
    let z = tape.reshape(z, &[b, t, d])?;
    let wo = tape.param(params, p.wo);
    let bo = tape.param(params, p.bo);
    let y = tape.matmul(z, wo)?;
    tape.add(y, bo)
}
