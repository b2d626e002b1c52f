//! The assembled classifier: embeddings → input projection → encoder →
//! bi-attention → LSTM → pooling → FFN head → softmax.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{Batch, LabelMap};
use crate::embeddings::mix_layers;
use crate::encoder::{sinusoidal_encoding, Encoder, EncoderConfig, FfnParams, PositionMode};
use crate::error::{Result, TsaError};
use crate::fusion::{biattention, lstm_integrate, pool, BiAttentionParams, LstmParams, PoolParams, PoolStrategy};
use crate::numerics::{checkpoint, Mode, ParamBuilder, ParamId, ParamSet, Rng, Tape, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "model.tsa";
pub const METADATA_FILE: &str = "model.meta";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of each incoming token vector.
    pub input_dim: usize,
    /// Number of stacked contextual layers to mix, `None` for plain vectors.
    pub input_layers: Option<usize>,
    pub encoder: EncoderConfig,
    pub d_lstm: usize,
    pub d_ff_head: usize,
    pub pooling: PoolStrategy,
    pub p_emb: f64,
    pub p_drop: f64,
    pub eps_ls: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            input_dim: encoder.d_model,
            input_layers: None,
            d_lstm: encoder.d_model,
            encoder,
            d_ff_head: 128,
            pooling: PoolStrategy::ConcatBoth,
            p_emb: 0.5,
            p_drop: 0.1,
            eps_ls: 0.1,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d_lstm", self.d_lstm),
            ("d_ff_head", self.d_ff_head),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(TsaError::Config(format!("{name} must be positive")));
            }
        }
        if self.input_layers == Some(0) {
            return Err(TsaError::Config("input_layers must be positive".into()));
        }
        for (name, p) in [("p_emb", self.p_emb), ("p_drop", self.p_drop), ("eps_ls", self.eps_ls)] {
            if !(0.0..1.0).contains(&p) {
                return Err(TsaError::Config(format!("{name}={p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("input_layers", self.input_layers.unwrap_or(0).to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("num_heads", e.num_heads.to_string()),
            ("d_model", e.d_model.to_string()),
            ("d_ff", e.d_ff.to_string()),
            ("k_clip", e.k_clip.to_string()),
            ("p_attn", e.p_attn.to_string()),
            ("p_res", e.p_res.to_string()),
            ("layer_norm_eps", e.ln_eps.to_string()),
            (
                "position_mode",
                match e.position {
                    PositionMode::Relative => "rpr",
                    PositionMode::Sinusoidal => "sinusoidal",
                }
                .to_string(),
            ),
            ("d_lstm", self.d_lstm.to_string()),
            ("d_ff_head", self.d_ff_head.to_string()),
            ("pooling", self.pooling.as_str().to_string()),
            ("p_emb", self.p_emb.to_string()),
            ("p_drop", self.p_drop.to_string()),
            ("eps_ls", self.eps_ls.to_string()),
            ("num_classes", self.num_classes.to_string()),
        ]
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| TsaError::format(METADATA_FILE, format!("missing key {key}")))?;
            raw.parse()
                .map_err(|_| TsaError::format(METADATA_FILE, format!("bad value {raw:?} for {key}")))
        }
        let position = match get::<String>(map, "position_mode")?.as_str() {
            "rpr" => PositionMode::Relative,
            "sinusoidal" => PositionMode::Sinusoidal,
            other => return Err(TsaError::format(METADATA_FILE, format!("bad position_mode {other:?}"))),
        };
        let layers: usize = get(map, "input_layers")?;
        Ok(ModelConfig {
            input_dim: get(map, "input_dim")?,
            input_layers: (layers > 0).then_some(layers),
            encoder: EncoderConfig {
                num_layers: get(map, "num_layers")?,
                num_heads: get(map, "num_heads")?,
                d_model: get(map, "d_model")?,
                d_ff: get(map, "d_ff")?,
                k_clip: get(map, "k_clip")?,
                p_attn: get(map, "p_attn")?,
                p_res: get(map, "p_res")?,
                ln_eps: get(map, "layer_norm_eps")?,
                position,
            },
            d_lstm: get(map, "d_lstm")?,
            d_ff_head: get(map, "d_ff_head")?,
            pooling: get::<String>(map, "pooling")?.parse()?,
            p_emb: get(map, "p_emb")?,
            p_drop: get(map, "p_drop")?,
            eps_ls: get(map, "eps_ls")?,
            num_classes: get(map, "num_classes")?,
        })
    }
}

#[derive(Clone, Debug)]
struct Parts {
    mix: Option<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
    encoder: Encoder,
    fuse: BiAttentionParams,
    lstm: LstmParams,
    pool: Option<PoolParams>,
    head: FfnParams,
}

impl Parts {
    fn build(config: &ModelConfig, b: &mut ParamBuilder) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d_model;
        let mix = match config.input_layers {
            Some(l) => Some((b.zeros("emb.mix.s", &[l])?, b.full("emb.mix.gamma", &[1], 1.0)?)),
            None => None,
        };
        let proj_w = b.xavier("input.proj.w", config.input_dim, d)?;
        let proj_b = b.zeros("input.proj.b", &[d])?;
        let encoder = Encoder::build(&config.encoder, b)?;
        let fuse = BiAttentionParams::build(b, d)?;
        let lstm = LstmParams::build(b, d, config.d_lstm)?;
        let pool = if config.pooling.uses_attention() {
            Some(PoolParams::build(b, config.d_lstm)?)
        } else {
            None
        };
        let d_pool = config.pooling.output_dim(config.d_lstm);
        let head = FfnParams::build(b, "head", d_pool, config.d_ff_head, config.num_classes)?;
        Ok(Parts {
            mix,
            proj_w,
            proj_b,
            encoder,
            fuse,
            lstm,
            pool,
            head,
        })
    }
}

/// Tape handles for the intermediate stages of one forward pass.
pub struct ForwardOutput {
    /// `[B × C]`.
    pub logits: Var,
    /// Encoder output, `[B × T × d_model]`.
    pub encoded: Var,
    /// Pooled vector, `[B × d_pool]`.
    pub pooled: Var,
    /// Pooling weights, `[B × T]`.
    pub pool_weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub attn_weights: Option<Vec<f64>>,
}

/// Softmax of one logit row, with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct TsaModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub labels: LabelMap,
    parts: Parts,
}

impl TsaModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, labels: LabelMap, seed: u64) -> Result<Self> {
        if labels.num_classes() != config.num_classes {
            return Err(TsaError::Config(format!(
                "config has {} classes but the label map has {}",
                config.num_classes,
                labels.num_classes()
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = Rng::derive(seed, 1);
        let parts = Parts::build(&config, &mut ParamBuilder::init(&mut params, &mut rng))?;
        Ok(TsaModel {
            config,
            params,
            labels,
            parts,
        })
    }

    /// Wraps an existing parameter set, checking every expected tensor is
    /// present with the right shape and nothing else is.
    pub fn from_params(config: ModelConfig, labels: LabelMap, mut params: ParamSet) -> Result<Self> {
        if labels.num_classes() != config.num_classes {
            return Err(TsaError::Config(format!(
                "config has {} classes but the label map has {}",
                config.num_classes,
                labels.num_classes()
            )));
        }
        if let Some(w2) = params.by_name("head.w2") {
            let cols = w2.value.shape().last().copied().unwrap_or(0);
            if cols != config.num_classes {
                return Err(TsaError::Config(format!(
                    "checkpoint head has {cols} outputs but config has {} classes",
                    config.num_classes
                )));
            }
        }
        let parts = Parts::build(&config, &mut ParamBuilder::bind(&mut params))?;
        let mut reference = ParamSet::new();
        let mut rng = Rng::new(0);
        Parts::build(&config, &mut ParamBuilder::init(&mut reference, &mut rng))?;
        if let Some((_, extra)) = params.iter().find(|(_, p)| reference.id(&p.name).is_none()) {
            return Err(TsaError::format(&extra.name, "unexpected tensor in checkpoint"));
        }
        Ok(TsaModel {
            config,
            params,
            labels,
            parts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn encoder(&self) -> &Encoder {
        &self.parts.encoder
    }

    /// Full forward pass. Eval mode is deterministic and ignores `rng`.
    pub fn forward_detailed(&self, tape: &mut Tape, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let ps = &self.params;
        let p = &self.parts;
        if batch.input_dim() != cfg.input_dim {
            return Err(TsaError::Config(format!(
                "embedding stage: batch vectors have width {} but the model expects {}",
                batch.input_dim(),
                cfg.input_dim
            )));
        }
        let inputs = tape.constant(batch.inputs.clone());
        let x = match (p.mix, batch.is_layered()) {
            (Some((s, gamma)), true) => {
                let s = tape.param(ps, s);
                let gamma = tape.param(ps, gamma);
                mix_layers(tape, inputs, s, gamma)?
            }
            (None, false) => inputs,
            (Some(_), false) => {
                return Err(TsaError::Config(
                    "embedding stage: model mixes contextual layers but batch has plain vectors".into(),
                ))
            }
            (None, true) => {
                return Err(TsaError::Config(
                    "embedding stage: batch has stacked layers but model expects plain vectors".into(),
                ))
            }
        };
        let x = tape.dropout(x, cfg.p_emb, mode, rng)?;
        let w = tape.param(ps, p.proj_w);
        let b = tape.param(ps, p.proj_b);
        let x = tape.matmul(x, w)?;
        let mut x = tape.add(x, b)?;
        if cfg.encoder.position == PositionMode::Sinusoidal {
            let pe = tape.constant(sinusoidal_encoding(batch.max_len(), cfg.encoder.d_model));
            x = tape.add(x, pe)?;
        }
        let encoded = p.encoder.encode(tape, ps, x, &batch.mask, mode, rng)?;
        let bi = biattention(tape, ps, &p.fuse, encoded, &batch.mask)?;
        let fused = tape.dropout(bi.fused, cfg.p_drop, mode, rng)?;
        let h = lstm_integrate(tape, ps, &p.lstm, fused, &batch.mask)?;
        let pooled = pool(tape, ps, cfg.pooling, p.pool.as_ref(), h, &batch.mask)?;
        let z = tape.dropout(pooled.vector, cfg.p_drop, mode, rng)?;
        let logits = p.head.forward(tape, ps, z)?;
        Ok(ForwardOutput {
            logits,
            encoded,
            pooled: pooled.vector,
            pool_weights: pooled.weights,
        })
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<Var> {
        Ok(self.forward_detailed(tape, batch, mode, rng)?.logits)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let out = self.forward(&mut tape, batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Label-smoothed cross-entropy of the forward logits.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| TsaError::Usage("loss needs a labelled batch".into()))?;
        let logits = self.forward(tape, batch, mode, rng)?;
        tape.label_smoothed_ce(logits, labels, self.config.eps_ls)
    }

    /// Eval-mode loss value without keeping the tape.
    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let loss = self.loss(&mut tape, batch, Mode::Eval, &mut rng)?;
        Ok(tape.value(loss).item())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(0);
        let out = self.forward_detailed(&mut tape, batch, Mode::Eval, &mut rng)?;
        let logits = tape.value(out.logits);
        let weights = tape.value(out.pool_weights);
        Ok((0..batch.size())
            .map(|b| {
                let probs = softmax(logits.row(b));
                let label = argmax(&probs);
                let len = batch.lengths[b];
                Prediction {
                    probs,
                    label,
                    attn_weights: Some(weights.row(b)[..len].to_vec()),
                }
            })
            .collect())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// Writes `model.tsa` and `model.meta` into `dir`. `extra` entries are
    /// stored in the metadata under a `run.` prefix.
    pub fn save(&self, dir: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| TsaError::io(dir, e))?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.named_tensors())?;
        let mut meta = String::from("# tsa checkpoint metadata\nformat=1\n");
        for (k, v) in self.config.to_pairs() {
            meta.push_str(&format!("{k}={v}\n"));
        }
        for (i, l) in self.labels.labels().iter().enumerate() {
            meta.push_str(&format!("label.{i}={l}\n"));
        }
        for (k, v) in extra {
            meta.push_str(&format!("run.{k}={v}\n"));
        }
        let path = dir.join(METADATA_FILE);
        std::fs::write(&path, meta).map_err(|e| TsaError::io(&path, e))
    }

    /// Loads a model saved with [`TsaModel::save`], returning it with the
    /// `run.` metadata entries (prefix stripped).
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let meta_path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| TsaError::io(&meta_path, e))?;
        let map = parse_key_values(&text, METADATA_FILE)?;
        if map.get("format").map(String::as_str) != Some("1") {
            return Err(TsaError::format(METADATA_FILE, "missing or unsupported format"));
        }
        let config = ModelConfig::from_map(&map)?;
        let mut labels = Vec::new();
        while let Some(l) = map.get(&format!("label.{}", labels.len())) {
            labels.push(l.clone());
        }
        let labels = LabelMap::from_labels(&labels).map_err(|_| TsaError::format(METADATA_FILE, "no labels"))?;
        let mut params = ParamSet::new();
        for (name, t) in checkpoint::load(&dir.join(CHECKPOINT_FILE))? {
            params
                .insert(name.clone(), t)
                .map_err(|_| TsaError::format(&name, "tensor appears more than once"))?;
        }
        let model = TsaModel::from_params(config, labels, params)?;
        let extra = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("run.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok((model, extra))
    }
}

/// Parses flat `key=value` text with `#` comment lines. Duplicate keys are
/// an error.
pub fn parse_key_values(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TsaError::format(format!("{source}:{}", i + 1), "expected key=value"))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(TsaError::format(format!("{source}:{}", i + 1), format!("duplicate key {k}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn softmax_of_ties_and_extremes() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[10.0, -10.0]);
        assert!(p[0] > 0.999);
    }

    #[test]
    fn key_values_reject_duplicates() {
        assert!(parse_key_values("a=1\na=2\n", "x").is_err());
        let m = parse_key_values("# c\na = 1\nlabel.0=x=y\n", "x").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["label.0"], "x=y");
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let labels = LabelMap::from_labels(["a", "b", "c"]).unwrap();
        let err = TsaModel::new(ModelConfig::default(), labels, 0).unwrap_err();
        assert!(matches!(err, TsaError::Config(_)));
    }
}
