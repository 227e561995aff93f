//! Unigram subword tokenizer: training, Viterbi encoding, and the two
//! intrinsic quality metrics (split ratio, unk portion) with a vocabulary
//! size sweep built on them.

mod metrics;
mod model;
mod train;

pub use metrics::{measure_metrics, vocab_sweep, SweepResult, TokenizerMetrics};
pub use model::{
    TokenizerModel, BOS, EOS, MASK, NUM_SPECIALS, PAD, SPECIALS, UNK, WORD_MARKER,
};
pub use train::{train_unigram, train_unigram_nested, TrainOptions, EM_ROUNDS, MAX_SEED_CHARS};
