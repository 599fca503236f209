use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::data::{split_tokens, Vocab};
use crate::error::{Error, Result};
use crate::siamese::{SentencePair, CLASS_LABELS, SCORE_SCALE};

/// Loads sentence-similarity pairs from a tab-separated file.
///
/// Two layouts are accepted, detected per line by column count:
/// the 7-column distribution layout (genre, file, year, id, score,
/// sentence1, sentence2) and a bare 3-column layout (score, sentence1,
/// sentence2). Blank lines are skipped; anything else is a data error with
/// its 1-based line number.
pub fn load_sts(path: &Path) -> Result<Vec<SentencePair>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (score_col, a, b) = match cols.len() {
            7 => (cols[4], cols[5], cols[6]),
            3 => (cols[0], cols[1], cols[2]),
            n => {
                return Err(Error::Data {
                    line: lineno,
                    msg: format!("expected 3 or 7 tab-separated columns, found {n}"),
                })
            }
        };
        let score: f64 = score_col.trim().parse().map_err(|_| Error::Data {
            line: lineno,
            msg: format!("similarity score {score_col:?} is not a number"),
        })?;
        if !(0.0..=SCORE_SCALE).contains(&score) {
            return Err(Error::Data {
                line: lineno,
                msg: format!("similarity score {score} outside [0, {SCORE_SCALE}]"),
            });
        }
        pairs.push(SentencePair::scored(a, b, score));
    }
    Ok(pairs)
}

/// Labeled pairs plus the number of examples dropped for carrying the
/// "no consensus" label.
#[derive(Debug)]
pub struct NliData {
    pub pairs: Vec<SentencePair>,
    pub skipped: usize,
}

/// Loads inference pairs from JSON lines with `sentence1`, `sentence2`, and
/// `gold_label` fields. Examples labeled `-` (annotators disagreed) are
/// skipped and counted; unknown labels are data errors.
pub fn load_nli(path: &Path) -> Result<NliData> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Data {
            line: lineno,
            msg: format!("invalid json: {e}"),
        })?;
        let field = |name: &str| -> Result<String> {
            value
                .get(name)
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .ok_or_else(|| Error::Data {
                    line: lineno,
                    msg: format!("missing string field {name:?}"),
                })
        };
        let label = field("gold_label")?;
        if label == "-" {
            skipped += 1;
            continue;
        }
        let Some(label_id) = CLASS_LABELS.iter().position(|l| *l == label) else {
            return Err(Error::Data {
                line: lineno,
                msg: format!("unknown gold_label {label:?}"),
            });
        };
        pairs.push(SentencePair::labeled(field("sentence1")?, field("sentence2")?, label_id));
    }
    Ok(NliData { pairs, skipped })
}

/// Builds a vocabulary from every word of every sentence, sorted, so the
/// same corpus always yields the same table regardless of pair order.
pub fn vocab_from_pairs(pairs: &[SentencePair]) -> Result<Vocab> {
    let mut words = BTreeSet::new();
    for p in pairs {
        for text in [&p.text_a, &p.text_b] {
            words.extend(split_tokens(text));
        }
    }
    Vocab::from_words(words)
}
