//! Adapters from public dataset distributions to the canonical
//! `label<TAB>text` format.
//!
//! * `sst`: PTB-style sentiment trees, one per line (`(3 (2 It) ...)`). The
//!   root label is kept; leaves are joined with single spaces and
//!   `-LRB-`/`-RRB-` are restored to parentheses. Binary granularity drops
//!   neutral (2) sentences and maps 0–1 → `negative`, 3–4 → `positive`.
//!   Fine granularity keeps all five classes.
//! * `polemo`: one review per line ending in a `__label__<code>` token; the
//!   code after the prefix is the label.
//! * `germeval`: TAB-separated `id, text, relevance, sentiment[, aspects]`.
//! * `tsv`: canonical input, passed through.

use std::str::FromStr;

use super::{parse_tsv, tokenize, Example, TsvSchema};
use crate::error::{Result, TsaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Sst,
    Polemo,
    Germeval,
    Tsv,
}

impl FromStr for DatasetKind {
    type Err = TsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sst" => Ok(DatasetKind::Sst),
            "polemo" => Ok(DatasetKind::Polemo),
            "germeval" => Ok(DatasetKind::Germeval),
            "tsv" => Ok(DatasetKind::Tsv),
            other => Err(TsaError::Usage(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SstGranularity {
    Binary,
    Fine,
}

const SST_FINE: [&str; 5] = ["very negative", "negative", "neutral", "positive", "very positive"];

fn example(label: &str, text: String, line: usize) -> Example {
    Example {
        label: label.to_string(),
        tokens: tokenize(&text, false),
        text,
        line,
    }
}

fn lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Root label and leaf words of one PTB sentiment tree.
pub fn parse_sst_tree(line: &str) -> std::result::Result<(u8, Vec<String>), String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in line.chars() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }

    fn node(tokens: &[String], pos: &mut usize, leaves: &mut Vec<String>) -> std::result::Result<u8, String> {
        if tokens.get(*pos).map(String::as_str) != Some("(") {
            return Err(format!("expected '(' at token {}", *pos + 1));
        }
        *pos += 1;
        let label: u8 = tokens
            .get(*pos)
            .and_then(|t| t.parse().ok())
            .filter(|&l: &u8| l <= 4)
            .ok_or_else(|| format!("expected sentiment label 0-4 at token {}", *pos + 1))?;
        *pos += 1;
        match tokens.get(*pos).map(String::as_str) {
            Some("(") => {
                while tokens.get(*pos).map(String::as_str) == Some("(") {
                    node(tokens, pos, leaves)?;
                }
            }
            Some(")") | None => return Err(format!("empty node at token {}", *pos + 1)),
            Some(word) => {
                let word = match word {
                    "-LRB-" => "(",
                    "-RRB-" => ")",
                    w => w,
                };
                leaves.push(word.to_string());
                *pos += 1;
            }
        }
        if tokens.get(*pos).map(String::as_str) != Some(")") {
            return Err(format!("expected ')' at token {}", *pos + 1));
        }
        *pos += 1;
        Ok(label)
    }

    let mut pos = 0;
    let mut leaves = Vec::new();
    let label = node(&tokens, &mut pos, &mut leaves)?;
    if pos != tokens.len() {
        return Err(format!("trailing input after token {pos}"));
    }
    Ok((label, leaves))
}

pub fn convert_sst(content: &str, granularity: SstGranularity, source: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(content) {
        let (label, leaves) =
            parse_sst_tree(line).map_err(|m| TsaError::format(format!("{source}:{lineno}"), m))?;
        let text = leaves.join(" ");
        let name = match (granularity, label) {
            (SstGranularity::Fine, l) => SST_FINE[l as usize],
            (SstGranularity::Binary, 2) => continue,
            (SstGranularity::Binary, 0 | 1) => "negative",
            (SstGranularity::Binary, _) => "positive",
        };
        out.push(example(name, text, lineno));
    }
    Ok(out)
}

pub fn convert_polemo(content: &str, source: &str) -> Result<Vec<Example>> {
    lines(content)
        .map(|(lineno, line)| {
            let loc = || format!("{source}:{lineno}");
            let trimmed = line.trim_end();
            let (text, last) = trimmed.rsplit_once(char::is_whitespace).unwrap_or(("", trimmed));
            let label = last
                .strip_prefix("__label__")
                .filter(|l| !l.is_empty())
                .ok_or_else(|| TsaError::format(loc(), "missing trailing __label__ token"))?;
            let text = text.replace('\t', " ").trim().to_string();
            if text.is_empty() {
                return Err(TsaError::format(loc(), "empty review text"));
            }
            Ok(example(label, text, lineno))
        })
        .collect()
}

pub fn convert_germeval(content: &str, source: &str) -> Result<Vec<Example>> {
    lines(content)
        .map(|(lineno, line)| {
            let loc = || format!("{source}:{lineno}");
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(TsaError::format(loc(), format!("expected at least 4 columns, found {}", cols.len())));
            }
            let text = cols[1].trim();
            let label = cols[3].trim();
            if text.is_empty() || label.is_empty() {
                return Err(TsaError::format(loc(), "empty text or sentiment column"));
            }
            Ok(example(label, text.to_string(), lineno))
        })
        .collect()
}

pub fn convert(kind: DatasetKind, content: &str, granularity: SstGranularity, source: &str) -> Result<Vec<Example>> {
    match kind {
        DatasetKind::Sst => convert_sst(content, granularity, source),
        DatasetKind::Polemo => convert_polemo(content, source),
        DatasetKind::Germeval => convert_germeval(content, source),
        DatasetKind::Tsv => parse_tsv(content, TsvSchema::LabelFirst, false, source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sst_tree_leaves_and_root() {
        let (label, leaves) = parse_sst_tree("(3 (2 It) (4 (4 (2 's) (4 good)) (2 .)))").unwrap();
        assert_eq!(label, 3);
        assert_eq!(leaves, vec!["It", "'s", "good", "."]);
    }

    #[test]
    fn sst_binary_drops_neutral() {
        let content = "(3 (2 fine) (3 film))\n(2 (2 meh))\n(0 (0 awful))\n";
        let ex = convert_sst(content, SstGranularity::Binary, "s").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].label, "positive");
        assert_eq!(ex[0].text, "fine film");
        assert_eq!(ex[1].label, "negative");
        let fine = convert_sst(content, SstGranularity::Fine, "s").unwrap();
        assert_eq!(fine.len(), 3);
        assert_eq!(fine[1].label, "neutral");
    }

    #[test]
    fn sst_brackets_restored_and_errors_located() {
        let (_, leaves) = parse_sst_tree("(2 (2 -LRB-) (2 x) (2 -RRB-))").unwrap();
        assert_eq!(leaves.join(" "), "( x )");
        let err = convert_sst("(2 (2 a)\n", SstGranularity::Fine, "s").unwrap_err();
        assert!(err.to_string().contains("s:1"), "{err}");
    }

    #[test]
    fn polemo_label_suffix() {
        let ex = convert_polemo("Bardzo dobry lekarz . __label__meta_plus_m\n", "p").unwrap();
        assert_eq!(ex[0].label, "meta_plus_m");
        assert_eq!(ex[0].text, "Bardzo dobry lekarz .");
        assert!(convert_polemo("no label here\n", "p").is_err());
    }

    #[test]
    fn germeval_columns() {
        let ex = convert_germeval("http://x\tZug zu spät\ttrue\tnegative\tZugfahrt#Haupt:negative\n", "g").unwrap();
        assert_eq!(ex[0].label, "negative");
        assert_eq!(ex[0].text, "Zug zu spät");
        assert!(convert_germeval("a\tb\n", "g").is_err());
    }
}
