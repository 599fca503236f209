use crate::data::{tokenize, TokenizedBatch, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::siamese::{cosine_similarity, SentencePair, SiameseModel};

/// Sentences per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Fractional ranks, 1-based, with ties sharing their average rank.
/// `rank(&[10, 20, 20, 30])` is `[1, 2.5, 2.5, 4]`.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_series(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{what}: series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Undefined(format!(
            "{what} needs at least two observations, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: series contain non-finite values")));
    }
    Ok(())
}

/// Pearson product-moment correlation. Constant series have no defined
/// correlation and are rejected rather than returning NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y, "pearson")?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "pearson: a constant series has no defined correlation".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Spearman rank correlation: Pearson applied to fractional ranks, which
/// handles ties exactly.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y, "spearman")?;
    pearson(&rank(x), &rank(y))
}

/// Correlation of predicted cosine similarities against gold scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub spearman: f64,
    pub pearson: f64,
    pub pairs: usize,
}

impl EvalReport {
    /// Headline rendering, correlations scaled by 100:
    /// `"85.32 (84.51)"` for spearman 0.8532, pearson 0.8451.
    pub fn rendered(&self) -> String {
        format!("{:.2} ({:.2})", self.spearman * 100.0, self.pearson * 100.0)
    }

    /// Key-value rendering for report files.
    pub fn to_key_values(&self) -> String {
        format!(
            "pairs\t{}\nspearman\t{:.6}\npearson\t{:.6}\nrendered\t{}\n",
            self.pairs,
            self.spearman,
            self.pearson,
            self.rendered()
        )
    }
}

/// Embeds every pair and correlates cosine similarity with the gold score.
pub fn evaluate_sts<F: Real>(
    model: &SiameseModel<F>,
    vocab: &Vocab,
    pairs: &[SentencePair],
) -> Result<EvalReport> {
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "evaluation needs at least two scored pairs, got {}",
            pairs.len()
        )));
    }
    let max_len = model.config().max_len;
    let mut gold = Vec::with_capacity(pairs.len());
    let mut predicted = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let mut rows_a = Vec::with_capacity(chunk.len());
        let mut rows_b = Vec::with_capacity(chunk.len());
        for (i, p) in chunk.iter().enumerate() {
            let score = p.score.ok_or_else(|| {
                Error::Input(format!("pair {} has no similarity score", gold.len() + i))
            })?;
            gold.push(score);
            rows_a.push(tokenize(vocab, &p.text_a, max_len)?);
            rows_b.push(tokenize(vocab, &p.text_b, max_len)?);
        }
        let ea = model.embed(&TokenizedBatch::from_rows(&rows_a)?)?;
        let eb = model.embed(&TokenizedBatch::from_rows(&rows_b)?)?;
        let h = ea.shape()[1];
        for i in 0..chunk.len() {
            let u = &ea.data()[i * h..(i + 1) * h];
            let v = &eb.data()[i * h..(i + 1) * h];
            predicted.push(cosine_similarity(u, v)?.as_f64());
        }
    }
    Ok(EvalReport {
        spearman: spearman(&predicted, &gold)?,
        pearson: pearson(&predicted, &gold)?,
        pairs: pairs.len(),
    })
}
