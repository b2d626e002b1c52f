//! Dataset ingestion: tokenisation, the canonical two-column TSV format,
//! label maps, and padded batches with masks.

pub mod convert;

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::embeddings::Embedder;
use crate::encoder::AttentionMask;
use crate::error::{Result, TsaError};
use crate::numerics::{Rng, Tensor};

/// Splits on whitespace, then peels leading and trailing punctuation off
/// each chunk as single-character tokens. Anything that is neither
/// alphanumeric nor whitespace counts as punctuation.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let is_punct = |c: &char| !c.is_alphanumeric();
        let lead = chars.iter().take_while(|c| is_punct(c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(c)).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    if lowercase {
        out.iter_mut().for_each(|t| *t = t.to_lowercase());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: String,
    pub text: String,
    pub tokens: Vec<String>,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsvSchema {
    LabelFirst,
    TextFirst,
}

impl FromStr for TsvSchema {
    type Err = TsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_first" => Ok(TsvSchema::LabelFirst),
            "text_first" => Ok(TsvSchema::TextFirst),
            other => Err(TsaError::Config(format!("unknown TSV schema {other:?}"))),
        }
    }
}

impl TsvSchema {
    pub fn as_str(self) -> &'static str {
        match self {
            TsvSchema::LabelFirst => "label_first",
            TsvSchema::TextFirst => "text_first",
        }
    }
}

/// Parses TSV content: one example per line, exactly one TAB, no header.
/// LF and CRLF line endings are both accepted.
pub fn parse_tsv(content: &str, schema: TsvSchema, lowercase: bool, source: &str) -> Result<Vec<Example>> {
    let mut lines: Vec<&str> = content.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let lineno = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            let loc = || format!("{source}:{lineno}");
            let mut parts = line.split('\t');
            let (Some(first), Some(second), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TsaError::format(loc(), "expected exactly one TAB separator"));
            };
            let (label, text) = match schema {
                TsvSchema::LabelFirst => (first, second),
                TsvSchema::TextFirst => (second, first),
            };
            if label.trim().is_empty() {
                return Err(TsaError::format(loc(), "empty label field"));
            }
            if text.trim().is_empty() {
                return Err(TsaError::format(loc(), "empty text field"));
            }
            Ok(Example {
                label: label.to_string(),
                text: text.to_string(),
                tokens: tokenize(text, lowercase),
                line: lineno,
            })
        })
        .collect()
}

pub fn read_tsv(path: &Path, schema: TsvSchema, lowercase: bool) -> Result<Vec<Example>> {
    let content = std::fs::read_to_string(path).map_err(|e| TsaError::io(path, e))?;
    parse_tsv(&content, schema, lowercase, &path.display().to_string())
}

pub fn format_tsv(examples: &[Example], schema: TsvSchema) -> String {
    let mut out = String::new();
    for ex in examples {
        let (a, b) = match schema {
            TsvSchema::LabelFirst => (&ex.label, &ex.text),
            TsvSchema::TextFirst => (&ex.text, &ex.label),
        };
        out.push_str(a);
        out.push('\t');
        out.push_str(b);
        out.push('\n');
    }
    out
}

pub fn write_tsv(path: &Path, examples: &[Example], schema: TsvSchema) -> Result<()> {
    std::fs::write(path, format_tsv(examples, schema)).map_err(|e| TsaError::io(path, e))
}

/// Bijection between label strings and `0..C`, in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn from_labels<S: AsRef<str>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut map = LabelMap::default();
        for l in labels {
            let l = l.as_ref();
            if !map.index.contains_key(l) {
                map.index.insert(l.to_string(), map.labels.len());
                map.labels.push(l.to_string());
            }
        }
        if map.labels.is_empty() {
            return Err(TsaError::Data("cannot build a label map from zero examples".into()));
        }
        Ok(map)
    }

    pub fn from_examples(train: &[Example]) -> Result<Self> {
        Self::from_labels(train.iter().map(|e| e.label.as_str()))
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Index of `label`, or a data error naming it.
    pub fn require(&self, label: &str) -> Result<usize> {
        self.index(label)
            .ok_or_else(|| TsaError::Data(format!("label {label:?} is not in the training label map")))
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

pub fn build_label_map(train: &[Example]) -> Result<LabelMap> {
    LabelMap::from_examples(train)
}

/// One sentence after embedding: `[T × D]` or `[L × T × D]`.
#[derive(Clone, Debug)]
pub struct EmbeddedExample {
    pub input: Tensor,
    pub label: Option<usize>,
    pub index: usize,
}

impl EmbeddedExample {
    pub fn len(&self) -> usize {
        let s = self.input.shape();
        s[s.len() - 2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A padded block of sentences.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B × T × D]`, or `[B × L × T × D]` for layered contextual input.
    /// Padding entries are exactly zero.
    pub inputs: Tensor,
    pub mask: AttentionMask,
    pub labels: Option<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// Position of each row in the source split.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_layered(&self) -> bool {
        self.inputs.rank() == 4
    }

    pub fn input_dim(&self) -> usize {
        *self.inputs.shape().last().expect("batch inputs have rank ≥ 3")
    }
}

/// Embeds every example; labels are mapped when `labels` is given.
pub fn embed_examples(examples: &[Example], embedder: &Embedder, labels: Option<&LabelMap>) -> Result<Vec<EmbeddedExample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.tokens.is_empty() {
                return Err(TsaError::Data(format!("line {}: no tokens", ex.line)));
            }
            let label = labels.map(|m| m.require(&ex.label)).transpose()?;
            Ok(EmbeddedExample {
                input: embedder.embed(i, &ex.tokens)?,
                label,
                index: i,
            })
        })
        .collect()
}

/// Pads a group of embedded sentences into one batch.
pub fn collate(items: &[&EmbeddedExample]) -> Result<Batch> {
    let first = items.first().ok_or_else(|| TsaError::Data("empty batch".into()))?;
    let layered = first.input.rank() == 3;
    let shape = first.input.shape();
    let (l, d) = if layered { (shape[0], shape[2]) } else { (1, shape[1]) };
    for it in items {
        let s = it.input.shape();
        let ok = if layered { s.len() == 3 && s[0] == l && s[2] == d } else { s.len() == 2 && s[1] == d };
        if !ok {
            return Err(TsaError::dim("collate", shape, s));
        }
    }
    let lengths: Vec<usize> = items.iter().map(|e| e.len()).collect();
    let t_max = *lengths.iter().max().expect("nonempty");
    let b = items.len();
    let mut data = vec![0.0; b * l * t_max * d];
    for (bi, it) in items.iter().enumerate() {
        let t = lengths[bi];
        let src = it.input.data();
        for li in 0..l {
            let dst0 = ((bi * l + li) * t_max) * d;
            let src0 = li * t * d;
            data[dst0..dst0 + t * d].copy_from_slice(&src[src0..src0 + t * d]);
        }
    }
    let shape = if layered { vec![b, l, t_max, d] } else { vec![b, t_max, d] };
    let labels = items.iter().map(|e| e.label).collect::<Option<Vec<usize>>>();
    Ok(Batch {
        inputs: Tensor::new(shape, data)?,
        mask: AttentionMask::from_lengths(&lengths, t_max)?,
        labels,
        lengths,
        indices: items.iter().map(|e| e.index).collect(),
    })
}

/// Groups embedded examples into batches of at most `batch_size`.
///
/// With `shuffle_seed` the order is a seeded permutation. With `bucketing`
/// the shuffled order is additionally sorted by length inside windows of
/// 20 batches and the resulting batches are shuffled again.
pub fn batch_embedded(
    examples: &[EmbeddedExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    bucketing: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(TsaError::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = shuffle_seed.map(Rng::new);
    if let Some(rng) = rng.as_mut() {
        rng.shuffle(&mut order);
    }
    if bucketing {
        for window in order.chunks_mut(batch_size * 20) {
            window.sort_by_key(|&i| examples[i].len());
        }
    }
    let mut batches = order
        .chunks(batch_size)
        .map(|idx| collate(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    if bucketing {
        if let Some(rng) = rng.as_mut() {
            rng.shuffle(&mut batches);
        }
    }
    Ok(batches)
}

/// Embeds, optionally shuffles, and pads `examples` into batches.
pub fn make_batches(
    examples: &[Example],
    embedder: &Embedder,
    labels: Option<&LabelMap>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    let embedded = embed_examples(examples, embedder, labels)?;
    batch_embedded(&embedded, batch_size, shuffle_seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Good movie.", false), toks(&["Good", "movie", "."]));
        assert_eq!(tokenize("a  b", false), toks(&["a", "b"]));
        assert_eq!(tokenize("Great!", true), toks(&["great", "!"]));
        assert_eq!(tokenize("\"Wow\"...", false), toks(&["\"", "Wow", "\"", ".", ".", "."]));
        assert_eq!(tokenize("don't", false), toks(&["don't"]));
        assert_eq!(tokenize("Zażółć gęślą!", false), toks(&["Zażółć", "gęślą", "!"]));
        assert!(tokenize("   ", false).is_empty());
    }

    #[test]
    fn tsv_direct_parse_and_errors() {
        let ex = parse_tsv("positive\tGreat film\n", TsvSchema::LabelFirst, false, "f").unwrap();
        assert_eq!(ex[0].label, "positive");
        assert_eq!(ex[0].text, "Great film");
        let err = parse_tsv("no tab here\n", TsvSchema::LabelFirst, false, "f").unwrap_err();
        assert!(err.to_string().contains("f:1"), "{err}");
        let err = parse_tsv("a\tb\nc\td\te\n", TsvSchema::LabelFirst, false, "f").unwrap_err();
        assert!(err.to_string().contains("f:2"), "{err}");
        let err = parse_tsv("pos\t  \n", TsvSchema::LabelFirst, false, "f").unwrap_err();
        assert!(err.to_string().contains("empty text"), "{err}");
    }

    #[test]
    fn tsv_crlf_and_text_first() {
        let ex = parse_tsv("Great film\tpositive\r\n", TsvSchema::TextFirst, false, "f").unwrap();
        assert_eq!(ex[0].label, "positive");
        assert_eq!(format_tsv(&ex, TsvSchema::TextFirst), "Great film\tpositive\n");
    }

    #[test]
    fn label_map_first_appearance() {
        let m = LabelMap::from_labels(["pos", "neg", "pos"]).unwrap();
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.index("pos"), Some(0));
        assert_eq!(m.index("neg"), Some(1));
        assert!(m.require("neutral").unwrap_err().to_string().contains("neutral"));
    }

    #[test]
    fn batches_partition_and_pad() {
        let examples = parse_tsv("a\tx y z\nb\tx y z w v\nc\tq\n", TsvSchema::LabelFirst, false, "f").unwrap();
        let map = build_label_map(&examples).unwrap();
        let emb = Embedder::Hash { dim: 4, seed: 1 };
        let batches = make_batches(&examples, &emb, Some(&map), 2, None).unwrap();
        assert_eq!(batches.iter().map(Batch::size).collect::<Vec<_>>(), vec![2, 1]);
        let b = &batches[0];
        assert_eq!(b.max_len(), 5);
        assert_eq!(&b.mask.valid()[..5], &[true, true, true, false, false]);
        assert!(b.inputs.data()[3 * 4..5 * 4].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_label_at_batching_is_data_error() {
        let train = parse_tsv("pos\ta\n", TsvSchema::LabelFirst, false, "t").unwrap();
        let dev = parse_tsv("neutral\tb\n", TsvSchema::LabelFirst, false, "d").unwrap();
        let map = build_label_map(&train).unwrap();
        let emb = Embedder::Hash { dim: 4, seed: 1 };
        let err = make_batches(&dev, &emb, Some(&map), 1, None).unwrap_err();
        assert!(matches!(err, TsaError::Data(ref m) if m.contains("neutral")));
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(batch_embedded(&[], 0, None, false).is_err());
    }
}
