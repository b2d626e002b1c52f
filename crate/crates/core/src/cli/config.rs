//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{parse_key_values, ModelConfig};
use crate::data::TsvSchema;
use crate::embeddings::LayerMode;
use crate::encoder::{EncoderConfig, PositionMode};
use crate::error::{Result, TsaError};
use crate::fusion::PoolStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Hash,
    Static,
    Contextual,
}

impl FromStr for EmbeddingSource {
    type Err = TsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(EmbeddingSource::Hash),
            "static" => Ok(EmbeddingSource::Static),
            "contextual" => Ok(EmbeddingSource::Contextual),
            other => Err(TsaError::Config(format!("unknown embedding_source {other:?}"))),
        }
    }
}

impl EmbeddingSource {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingSource::Hash => "hash",
            EmbeddingSource::Static => "static",
            EmbeddingSource::Contextual => "contextual",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub schema: TsvSchema,
    pub lowercase: bool,

    pub embedding_source: EmbeddingSource,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    pub static_path: Option<PathBuf>,
    pub contextual_train_path: Option<PathBuf>,
    pub contextual_dev_path: Option<PathBuf>,
    pub layer_mode: LayerMode,

    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_lstm: usize,
    pub d_ff_head: usize,
    pub k_clip: usize,
    pub position_mode: PositionMode,
    pub pooling: PoolStrategy,
    pub layer_norm_eps: f64,

    pub p_drop: f64,
    pub p_emb: f64,
    pub p_res: f64,
    pub p_attn: f64,
    pub eps_ls: f64,

    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub length_bucketing: bool,
    /// Stop after this many epochs without a dev improvement; 0 disables.
    pub early_stop_patience: usize,
    /// Also evaluate training accuracy after every epoch.
    pub eval_train: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_path: None,
            dev_path: None,
            schema: TsvSchema::LabelFirst,
            lowercase: false,
            embedding_source: EmbeddingSource::Hash,
            embedding_dim: 64,
            embedding_seed: 0,
            static_path: None,
            contextual_train_path: None,
            contextual_dev_path: None,
            layer_mode: LayerMode::Mix,
            num_layers: 2,
            num_heads: 4,
            d_model: 128,
            d_ff: 256,
            d_lstm: 128,
            d_ff_head: 128,
            k_clip: 10,
            position_mode: PositionMode::Relative,
            pooling: PoolStrategy::ConcatBoth,
            layer_norm_eps: 1e-6,
            p_drop: 0.1,
            p_emb: 0.5,
            p_res: 0.2,
            p_attn: 0.1,
            eps_ls: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            lr: 1e-4,
            warmup_steps: 0,
            clip_norm: 0.0,
            batch_size: 32,
            epochs: 20,
            seed: 42,
            length_bucketing: false,
            early_stop_patience: 0,
            eval_train: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| TsaError::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TsaError::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

impl RunConfig {
    /// Applies one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "train_path" => self.train_path = opt_path(raw),
            "dev_path" => self.dev_path = opt_path(raw),
            "schema" => self.schema = raw.parse()?,
            "lowercase" => self.lowercase = parse_bool(key, raw)?,
            "embedding_source" => self.embedding_source = raw.parse()?,
            "embedding_dim" => self.embedding_dim = parse_value(key, raw)?,
            "embedding_seed" => self.embedding_seed = parse_value(key, raw)?,
            "static_path" => self.static_path = opt_path(raw),
            "contextual_train_path" => self.contextual_train_path = opt_path(raw),
            "contextual_dev_path" => self.contextual_dev_path = opt_path(raw),
            "layer_mode" => {
                self.layer_mode = match raw {
                    "mix" => LayerMode::Mix,
                    "top_layer" => LayerMode::TopLayer,
                    _ => return Err(TsaError::Config(format!("invalid layer_mode {raw:?}"))),
                }
            }
            "num_layers" => self.num_layers = parse_value(key, raw)?,
            "num_heads" => self.num_heads = parse_value(key, raw)?,
            "d_model" => self.d_model = parse_value(key, raw)?,
            "d_ff" => self.d_ff = parse_value(key, raw)?,
            "d_lstm" => self.d_lstm = parse_value(key, raw)?,
            "d_ff_head" => self.d_ff_head = parse_value(key, raw)?,
            "k_clip" => self.k_clip = parse_value(key, raw)?,
            "position_mode" => {
                self.position_mode = match raw {
                    "rpr" => PositionMode::Relative,
                    "sinusoidal" => PositionMode::Sinusoidal,
                    _ => return Err(TsaError::Config(format!("invalid position_mode {raw:?}"))),
                }
            }
            "pooling" => self.pooling = raw.parse()?,
            "layer_norm_eps" => self.layer_norm_eps = parse_value(key, raw)?,
            "p_drop" => self.p_drop = parse_value(key, raw)?,
            "p_emb" => self.p_emb = parse_value(key, raw)?,
            "p_res" => self.p_res = parse_value(key, raw)?,
            "p_attn" => self.p_attn = parse_value(key, raw)?,
            "eps_ls" => self.eps_ls = parse_value(key, raw)?,
            "beta1" => self.beta1 = parse_value(key, raw)?,
            "beta2" => self.beta2 = parse_value(key, raw)?,
            "adam_eps" => self.adam_eps = parse_value(key, raw)?,
            "lr" => self.lr = parse_value(key, raw)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, raw)?,
            "clip_norm" => self.clip_norm = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "epochs" => self.epochs = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "length_bucketing" => self.length_bucketing = parse_bool(key, raw)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, raw)?,
            "eval_train" => self.eval_train = parse_bool(key, raw)?,
            other => return Err(TsaError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let map = parse_key_values(text, "config").map_err(|e| TsaError::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        if let Some(base) = base_dir {
            for p in [
                &mut cfg.train_path,
                &mut cfg.dev_path,
                &mut cfg.static_path,
                &mut cfg.contextual_train_path,
                &mut cfg.contextual_dev_path,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TsaError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TsaError::Config("batch_size must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(TsaError::Config("embedding_dim must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TsaError::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TsaError::Config(format!("{name}={b} outside [0, 1)")));
            }
        }
        if self.clip_norm < 0.0 {
            return Err(TsaError::Config("clip_norm must be non-negative".into()));
        }
        match self.embedding_source {
            EmbeddingSource::Static if self.static_path.is_none() => {
                return Err(TsaError::Config("embedding_source=static needs static_path".into()))
            }
            EmbeddingSource::Contextual
                if self.contextual_train_path.is_none() || self.contextual_dev_path.is_none() =>
            {
                return Err(TsaError::Config(
                    "embedding_source=contextual needs contextual_train_path and contextual_dev_path".into(),
                ))
            }
            _ => {}
        }
        self.model_config(self.embedding_dim, None, 2).validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            k_clip: self.k_clip,
            p_attn: self.p_attn,
            p_res: self.p_res,
            ln_eps: self.layer_norm_eps,
            position: self.position_mode,
        }
    }

    pub fn model_config(&self, input_dim: usize, input_layers: Option<usize>, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            input_layers,
            encoder: self.encoder_config(),
            d_lstm: self.d_lstm,
            d_ff_head: self.d_ff_head,
            pooling: self.pooling,
            p_emb: self.p_emb,
            p_drop: self.p_drop,
            eps_ls: self.eps_ls,
            num_classes,
        }
    }

    /// Embedding settings stored beside a checkpoint so eval and predict
    /// can rebuild the same embedder.
    pub fn embedding_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("embedding_source".into(), self.embedding_source.as_str().into());
        m.insert("embedding_dim".into(), self.embedding_dim.to_string());
        m.insert("embedding_seed".into(), self.embedding_seed.to_string());
        m.insert("lowercase".into(), self.lowercase.to_string());
        m.insert("schema".into(), self.schema.as_str().into());
        m.insert(
            "layer_mode".into(),
            match self.layer_mode {
                LayerMode::Mix => "mix",
                LayerMode::TopLayer => "top_layer",
            }
            .into(),
        );
        if let Some(p) = &self.static_path {
            m.insert("static_path".into(), p.display().to_string());
        }
        m
    }

    /// Rebuilds the embedding-related settings from checkpoint metadata.
    pub fn from_embedding_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in meta {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = RunConfig::default();
        assert_eq!(c.num_layers, 2);
        assert_eq!(c.k_clip, 10);
        assert_eq!((c.p_drop, c.p_emb, c.p_res, c.p_attn), (0.1, 0.5, 0.2, 0.1));
        assert_eq!(c.eps_ls, 0.1);
        assert_eq!((c.beta1, c.beta2, c.adam_eps), (0.9, 0.98, 1e-9));
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.pooling, PoolStrategy::ConcatBoth);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("learning_rate=0.1\n", None).unwrap_err();
        assert!(matches!(err, TsaError::Config(ref m) if m.contains("learning_rate")));
    }

    #[test]
    fn comments_and_relative_paths() {
        let c = RunConfig::parse("# hi\ntrain_path=train.tsv\nseed=7\n", Some(Path::new("/data"))).unwrap();
        assert_eq!(c.train_path, Some(PathBuf::from("/data/train.tsv")));
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("d_model=10\nnum_heads=4\n", None).is_err());
        assert!(RunConfig::parse("p_emb=1.0\n", None).is_err());
        assert!(RunConfig::parse("batch_size=abc\n", None).is_err());
        assert!(RunConfig::parse("embedding_source=static\n", None).is_err());
    }
}
