//! Tokenization, corpus loading, synthetic data, and model persistence.

mod checkpoint;
mod corpus;
mod synth;
mod vocab;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use corpus::{load_nli, load_sts, vocab_from_pairs, NliData};
pub use synth::{synth_sts, synth_vocab, MIN_SYNTH_WORDS};
pub use vocab::{
    split_tokens, tokenize, TokenizedBatch, TokenizedRow, Vocab, CLS_ID, PAD_ID,
    RESERVED, SEP_ID, UNK_ID,
};
