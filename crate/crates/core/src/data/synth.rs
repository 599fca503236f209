use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::siamese::{SentencePair, SCORE_SCALE};

/// Smallest vocabulary the generator can work with: enough room for a
/// sentence of eight distinct words plus three replacements.
pub const MIN_SYNTH_WORDS: usize = 12;

/// Word list `w0..w{n-1}` matching the ids the generator draws.
pub fn synth_vocab(n_words: usize) -> Vec<String> {
    (0..n_words).map(|i| format!("w{i}")).collect()
}

/// Generates scored sentence pairs with a known-by-construction similarity:
/// sentence B keeps a random subset of A's words and mixes in fresh ones,
/// and the score is exactly `SCORE_SCALE * |A ∩ B| / |A ∪ B|` over the word
/// sets. Deterministic for a given seed.
pub fn synth_sts(n_pairs: usize, n_words: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if n_words < MIN_SYNTH_WORDS {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least {MIN_SYNTH_WORDS} words, got {n_words}"
        )));
    }
    let mut rng = seeded(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut all: Vec<usize> = (0..n_words).collect();
    for _ in 0..n_pairs {
        let len_a = rng.gen_range(3..=8);
        all.shuffle(&mut rng);
        let a_words: Vec<usize> = all[..len_a].to_vec();
        let a_set: BTreeSet<usize> = a_words.iter().copied().collect();

        // Keep each word of A independently; the pair-level keep rate is
        // itself random so scores spread over the whole range.
        let p_keep: f64 = rng.gen();
        let mut b_words: Vec<usize> =
            a_words.iter().copied().filter(|_| rng.gen::<f64>() < p_keep).collect();
        let n_new = rng.gen_range(0..=3);
        let mut fresh: Vec<usize> = (0..n_words).filter(|w| !a_set.contains(w)).collect();
        fresh.shuffle(&mut rng);
        b_words.extend(fresh.into_iter().take(n_new));
        if b_words.is_empty() {
            // Never emit an empty sentence; fall back to one word of A.
            b_words.push(a_words[0]);
        }
        b_words.shuffle(&mut rng);

        let b_set: BTreeSet<usize> = b_words.iter().copied().collect();
        let inter = a_set.intersection(&b_set).count();
        let union = a_set.union(&b_set).count();
        let score = SCORE_SCALE * inter as f64 / union as f64;

        let text = |words: &[usize]| {
            words.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
        };
        pairs.push(SentencePair::scored(text(&a_words), text(&b_words), score));
    }
    Ok(pairs)
}
