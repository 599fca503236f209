use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Word-level vocabulary. Ids 0..=3 are reserved for the markers above;
/// words start at id 4 in insertion order. Lookup is case-insensitive
/// because the tokenizer lowercases everything.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vocab { words: Vec::new(), index: HashMap::new() };
        for w in words {
            let w: String = w.into();
            let w = w.trim().to_lowercase();
            if w.is_empty() {
                return Err(Error::Input("vocabulary entries must be non-empty".into()));
            }
            if w.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!(
                    "vocabulary entry {w:?} contains whitespace"
                )));
            }
            if RESERVED.iter().any(|r| r.eq_ignore_ascii_case(&w)) {
                return Err(Error::Input(format!(
                    "vocabulary entry {w:?} collides with a reserved marker"
                )));
            }
            if out.index.contains_key(&w) {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
            out.index.insert(w.clone(), RESERVED.len() + out.words.len());
            out.words.push(w);
        }
        Ok(out)
    }

    /// One word per line; blank lines are skipped.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for w in &self.words {
            text.push_str(w);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    /// Total id space, reserved markers included.
    pub fn size(&self) -> usize {
        RESERVED.len() + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Lowercases and splits into word tokens: maximal alphanumeric runs stay
/// together, every other non-whitespace character becomes its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A sentence encoded to a fixed length: `[CLS] w1 .. wn [SEP]` followed by
/// padding. `mask` is true at real tokens (markers included).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRow {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Encodes one sentence. Words beyond `max_len - 2` are dropped so the
/// leading marker and trailing separator always fit. A sentence with no
/// tokens at all is rejected.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<TokenizedRow> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold the sentence markers")));
    }
    let tokens = split_tokens(text);
    if tokens.is_empty() {
        return Err(Error::Input(format!("sentence {text:?} contains no tokens")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask: Vec<bool> = (0..max_len).map(|i| i < used).collect();
    Ok(TokenizedRow { ids, mask })
}

/// Row-major batch of equal-length tokenized sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenizedBatch {
    pub fn from_rows(rows: &[TokenizedRow]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("cannot batch zero sentences".into()))?;
        let seq_len = first.ids.len();
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut mask = Vec::with_capacity(rows.len() * seq_len);
        for row in rows {
            if row.ids.len() != seq_len || row.mask.len() != seq_len {
                return Err(Error::Shape(format!(
                    "batch rows disagree on length: {} vs {seq_len}",
                    row.ids.len()
                )));
            }
            ids.extend_from_slice(&row.ids);
            mask.extend_from_slice(&row.mask);
        }
        Ok(TokenizedBatch { batch: rows.len(), seq_len, ids, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_words(["the", "cat", "sat"]).unwrap()
    }

    #[test]
    fn splitting_separates_punctuation_and_lowercases() {
        assert_eq!(split_tokens("The cat's hat."), vec!["the", "cat", "'", "s", "hat", "."]);
        assert_eq!(split_tokens("a2z  b"), vec!["a2z", "b"]);
        assert_eq!(split_tokens("  "), Vec::<String>::new());
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = vocab();
        assert_eq!(v.id("the"), 4);
        assert_eq!(v.id("cat"), 5);
        assert_eq!(v.id("missing"), UNK_ID);
        assert_eq!(v.size(), 7);
    }

    #[test]
    fn tokenize_brackets_and_pads() {
        let v = vocab();
        let row = tokenize(&v, "The cat", 6).unwrap();
        assert_eq!(row.ids, vec![CLS_ID, 4, 5, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(row.mask, vec![true, true, true, true, false, false]);
    }

    #[test]
    fn tokenize_truncates_but_keeps_separator() {
        let v = vocab();
        let row = tokenize(&v, "the cat sat the cat sat", 5).unwrap();
        assert_eq!(row.ids, vec![CLS_ID, 4, 5, 6, SEP_ID]);
        assert!(row.mask.iter().all(|&m| m));
    }

    #[test]
    fn tokenize_rejects_empty_sentences() {
        let v = vocab();
        assert!(matches!(tokenize(&v, "   ", 8), Err(Error::Input(_))));
    }

    #[test]
    fn vocab_rejects_duplicates_and_markers() {
        assert!(Vocab::from_words(["a", "a"]).is_err());
        assert!(Vocab::from_words(["A", "a"]).is_err()); // case-folded duplicate
        assert!(Vocab::from_words(["[pad]"]).is_err());
        assert!(Vocab::from_words(["two words"]).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = std::env::temp_dir().join("msim_vocab_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("words.txt");
        let v = vocab();
        v.write(&path).unwrap();
        let back = Vocab::read(&path).unwrap();
        assert_eq!(v, back);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn batch_requires_equal_lengths() {
        let v = vocab();
        let a = tokenize(&v, "the cat", 6).unwrap();
        let b = tokenize(&v, "sat", 5).unwrap();
        assert!(TokenizedBatch::from_rows(&[a.clone(), b]).is_err());
        let c = tokenize(&v, "sat", 6).unwrap();
        let batch = TokenizedBatch::from_rows(&[a, c]).unwrap();
        assert_eq!(batch.batch, 2);
        assert_eq!(batch.seq_len, 6);
        assert_eq!(batch.ids.len(), 12);
    }
}
