//! Token → vector sources: static word-vector tables, precomputed
//! contextual layer stacks, and a seeded hash embedder that needs no
//! external files.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TsaError};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// Word-vector table in the conventional `token v1 … vD` text format.
#[derive(Clone, Debug)]
pub struct StaticTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl StaticTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_vector(&self) -> &[f64] {
        &self.unk
    }

    /// Total lookup: unknown tokens map to the mean vector.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.entries.get(token).map_or(&self.unk, Vec::as_slice)
    }

    pub fn embed(&self, tokens: &[String]) -> Tensor {
        let data = tokens.iter().flat_map(|t| self.lookup(t).iter().copied()).collect();
        Tensor::new(vec![tokens.len(), self.dim], data).expect("table rows have dim entries")
    }

    pub fn parse(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut dim = None;
        let mut entries = HashMap::new();
        let mut sum: Vec<f64> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| TsaError::format(format!("{source}:{lineno}"), e.to_string()))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            // word2vec-style "count dim" header
            if lineno == 1 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let values = rest
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| TsaError::format(format!("{source}:{lineno}"), e.to_string()))?;
            let d = *dim.get_or_insert(values.len());
            if values.is_empty() || values.len() != d {
                return Err(TsaError::format(
                    format!("{source}:{lineno}"),
                    format!("expected {d} values, found {}", values.len()),
                ));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
            }
            sum.iter_mut().zip(&values).for_each(|(s, v)| *s += v);
            entries.insert(token.to_string(), values);
        }
        let dim = dim.ok_or_else(|| TsaError::format(source, "empty embedding table"))?;
        let n = entries.len() as f64;
        let unk = sum.into_iter().map(|s| s / n).collect();
        Ok(StaticTable { dim, entries, unk })
    }
}

pub fn load_static_table(path: &Path) -> Result<StaticTable> {
    let file = std::fs::File::open(path).map_err(|e| TsaError::io(path, e))?;
    StaticTable::parse(BufReader::new(file), &path.display().to_string())
}

/// Per-token vectors from each layer of a pretrained contextual model for
/// one sentence. `layers[l][t]` is a `D`-vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualRecord {
    pub tokens: Vec<String>,
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl ContextualRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, Vec::len)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let t = self.tokens.len();
        if self.layers.is_empty() {
            return Err("record has no layers".into());
        }
        let d = self.dim();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != t {
                return Err(format!("layer {l} has {} rows for {t} tokens", layer.len()));
            }
            if layer.iter().any(|row| row.len() != d) {
                return Err(format!("layer {l} rows are not all of width {d}"));
            }
        }
        Ok(())
    }

    /// `[L × T × D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (l, t, d) = (self.num_layers(), self.tokens.len(), self.dim());
        let data = self.layers.iter().flatten().flatten().copied().collect();
        Tensor::new(vec![l, t, d], data).expect("validated record")
    }

    /// `[T × D]` tensor of the top layer.
    pub fn top_layer(&self) -> Tensor {
        let (t, d) = (self.tokens.len(), self.dim());
        let data = self.layers.last().into_iter().flatten().flatten().copied().collect();
        Tensor::new(vec![t, d], data).expect("validated record")
    }
}

/// Records of one dataset split, indexed by line. Every record shares `L`
/// and `D`.
#[derive(Clone, Debug, Default)]
pub struct ContextualStore {
    records: Vec<ContextualRecord>,
    num_layers: usize,
    dim: usize,
}

impl ContextualStore {
    pub fn from_records(records: Vec<ContextualRecord>) -> Result<Self> {
        let mut store = ContextualStore::default();
        for (i, rec) in records.into_iter().enumerate() {
            store.push(rec, &format!("record {}", i + 1))?;
        }
        Ok(store)
    }

    fn push(&mut self, rec: ContextualRecord, location: &str) -> Result<()> {
        rec.validate().map_err(|m| TsaError::format(location, m))?;
        if self.records.is_empty() {
            self.num_layers = rec.num_layers();
            self.dim = rec.dim();
        } else if rec.num_layers() != self.num_layers || rec.dim() != self.dim {
            return Err(TsaError::format(
                location,
                format!(
                    "layer shape L={} D={} differs from L={} D={}",
                    rec.num_layers(),
                    rec.dim(),
                    self.num_layers,
                    self.dim
                ),
            ));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<&ContextualRecord> {
        self.records.get(index)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[ContextualRecord] {
        &self.records
    }
}

/// Reads a line-delimited JSON file, one [`ContextualRecord`] per line.
pub fn load_contextual(path: &Path) -> Result<ContextualStore> {
    let file = std::fs::File::open(path).map_err(|e| TsaError::io(path, e))?;
    let mut store = ContextualStore::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let location = format!("{} record {}", path.display(), i + 1);
        let line = line.map_err(|e| TsaError::format(&location, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextualRecord =
            serde_json::from_str(&line).map_err(|e| TsaError::format(&location, e.to_string()))?;
        store.push(rec, &location)?;
    }
    Ok(store)
}

pub fn write_contextual(path: &Path, records: &[ContextualRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec).expect("records serialize");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| TsaError::io(path, e))?;
    file.write_all(&out).map_err(|e| TsaError::io(path, e))
}

/// Scalar mix of contextual layers: `gamma · Σ_l softmax(s)_l · layer_l`.
///
/// `layers` is `[L × T × D]` or batched `[B × L × T × D]`; `s` is `[L]` and
/// `gamma` is `[1]`. The result drops the layer axis.
pub fn mix_layers(tape: &mut Tape, layers: Var, s: Var, gamma: Var) -> Result<Var> {
    let shape = tape.shape(layers).to_vec();
    let (lead, l, t, d) = match shape.as_slice() {
        &[l, t, d] => (None, l, t, d),
        &[b, l, t, d] => (Some(b), l, t, d),
        _ => return Err(TsaError::dim("mix_layers", &shape, &[])),
    };
    if tape.shape(s) != [l] {
        return Err(TsaError::Config(format!(
            "layer mix has {} weights but input has {l} layers",
            tape.shape(s).first().copied().unwrap_or(0)
        )));
    }
    let w = tape.softmax_masked(s, None)?;
    let w = tape.reshape(w, &[1, l])?;
    let b = lead.unwrap_or(1);
    let flat = tape.reshape(layers, &[b, l, t * d])?;
    let mixed = tape.matmul(w, flat)?;
    let out_shape: Vec<usize> = match lead {
        Some(b) => vec![b, t, d],
        None => vec![t, d],
    };
    let mixed = tape.reshape(mixed, &out_shape)?;
    tape.mul(mixed, gamma)
}

/// Deterministic unit-norm vector per `(token, seed)`.
pub fn hash_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = Rng::from_seed_bytes(digest);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `[T × dim]` hash embedding of a token sequence.
pub fn hash_embed(tokens: &[String], dim: usize, seed: u64) -> Tensor {
    let data = tokens.iter().flat_map(|t| hash_vector(t, dim, seed)).collect();
    Tensor::new(vec![tokens.len(), dim], data).expect("hash rows have dim entries")
}

/// How contextual layers reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMode {
    /// Learned scalar mix over all layers.
    Mix,
    /// Top layer only, no learned weights.
    TopLayer,
}

/// An embedding source bound to one dataset split.
#[derive(Clone, Debug)]
pub enum Embedder {
    Hash { dim: usize, seed: u64 },
    Static(StaticTable),
    Contextual { store: ContextualStore, mode: LayerMode },
}

impl Embedder {
    /// Width of each token vector fed to the model.
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Hash { dim, .. } => *dim,
            Embedder::Static(t) => t.dim(),
            Embedder::Contextual { store, .. } => store.dim(),
        }
    }

    /// Number of stacked layers in embedded output, or `None` for plain
    /// `[T × D]` output.
    pub fn layers(&self) -> Option<usize> {
        match self {
            Embedder::Contextual {
                store,
                mode: LayerMode::Mix,
            } => Some(store.num_layers()),
            _ => None,
        }
    }

    /// Embeds sentence `index` of the split. Output is `[T × D]`, or
    /// `[L × T × D]` for a mixed contextual source.
    pub fn embed(&self, index: usize, tokens: &[String]) -> Result<Tensor> {
        match self {
            Embedder::Hash { dim, seed } => Ok(hash_embed(tokens, *dim, *seed)),
            Embedder::Static(table) => Ok(table.embed(tokens)),
            Embedder::Contextual { store, mode } => {
                let rec = store.get(index).ok_or_else(|| {
                    TsaError::Data(format!("no contextual record for sentence {}", index + 1))
                })?;
                if rec.tokens != tokens {
                    return Err(TsaError::Data(format!(
                        "contextual record {} tokens {:?} do not match sentence tokens {:?}",
                        index + 1,
                        rec.tokens,
                        tokens
                    )));
                }
                Ok(match mode {
                    LayerMode::Mix => rec.to_tensor(),
                    LayerMode::TopLayer => rec.top_layer(),
                })
            }
        }
    }
}
