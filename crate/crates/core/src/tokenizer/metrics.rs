use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::model::{TokenizerModel, UNK};
use super::train::{train_unigram_nested, TrainOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMetrics {
    /// Output tokens per whitespace word.
    pub split_ratio: f64,
    /// Fraction of output tokens that are `<unk>`.
    pub unk_portion: f64,
}

pub fn measure_metrics<S: AsRef<str>>(model: &TokenizerModel, corpus: &[S]) -> Result<TokenizerMetrics> {
    let mut words = 0usize;
    let mut tokens = 0usize;
    let mut unks = 0usize;
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            let ids = model.encode_word(w);
            words += 1;
            tokens += ids.len();
            unks += ids.iter().filter(|&&id| id == UNK).count();
        }
    }
    if words == 0 {
        return Err(Error::validation("cannot measure a tokenizer on an empty corpus"));
    }
    Ok(TokenizerMetrics {
        split_ratio: tokens as f64 / words as f64,
        unk_portion: unks as f64 / tokens as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub chosen: usize,
    pub thresholds_met: bool,
    pub table: Vec<(usize, TokenizerMetrics)>,
}

/// Grows the vocabulary until both intrinsic metrics are at or below their
/// thresholds. Vocabularies along the sweep are nested.
pub fn vocab_sweep(
    train_corpus: &[String],
    eval_corpus: &[String],
    sizes: &[usize],
    max_split_ratio: f64,
    max_unk: f64,
    forced: &BTreeSet<String>,
    seed: u64,
) -> Result<(SweepResult, Vec<TokenizerModel>)> {
    if sizes.is_empty() {
        return Err(Error::validation("vocabulary sweep needs at least one size"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("sweep sizes must be strictly ascending"));
    }
    let models = train_unigram_nested(train_corpus, sizes, forced, seed, &TrainOptions::default())?;
    let mut table = Vec::with_capacity(sizes.len());
    for (size, model) in sizes.iter().zip(&models) {
        table.push((*size, measure_metrics(model, eval_corpus)?));
    }
    let hit = table
        .iter()
        .find(|(_, m)| m.split_ratio <= max_split_ratio && m.unk_portion <= max_unk)
        .map(|(s, _)| *s);
    let result = SweepResult {
        chosen: hit.unwrap_or(*sizes.last().expect("nonempty")),
        thresholds_met: hit.is_some(),
        table,
    };
    Ok((result, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn model(pieces: &[&str]) -> TokenizerModel {
        TokenizerModel::new(
            pieces.iter().map(|p| (p.to_string(), -1.0)).collect(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    #[test]
    fn whole_word_vocab_has_unit_split_ratio() {
        let m = model(&["▁hello", "▁world"]);
        let r = measure_metrics(&m, &["hello world", "world"]).unwrap();
        assert_eq!(r.split_ratio, 1.0);
        assert_eq!(r.unk_portion, 0.0);
    }

    #[test]
    fn direct_counts() {
        let m = model(&["▁hel", "lo"]);
        assert_eq!(m.encode_pieces("hello"), vec!["▁hel", "lo"]);
        let r = measure_metrics(&m, &["hello"]).unwrap();
        assert_eq!((r.split_ratio, r.unk_portion), (2.0, 0.0));

        let r = measure_metrics(&m, &["Ω"]).unwrap();
        assert_eq!(r.unk_portion, 1.0);
        assert!(measure_metrics(&m, &["   "]).is_err());
    }

    fn corpus() -> Vec<String> {
        (0..300)
            .map(|i| format!("station{} lantern{} orchard river{} the", i % 13, i % 9, i % 5))
            .collect()
    }

    #[test]
    fn sweep_selection_rules() {
        let c = corpus();
        let (all, _) = vocab_sweep(&c, &c, &[40, 60, 80], 100.0, 1.0, &BTreeSet::new(), 0).unwrap();
        assert_eq!((all.chosen, all.thresholds_met), (40, true));
        let (none, _) = vocab_sweep(&c, &c, &[40, 60, 80], 0.5, 0.0, &BTreeSet::new(), 0).unwrap();
        assert_eq!((none.chosen, none.thresholds_met), (80, false));
        assert_eq!(none.table.len(), 3);
        assert!(vocab_sweep(&c, &c, &[], 1.0, 1.0, &BTreeSet::new(), 0).is_err());
        assert!(vocab_sweep(&c, &c, &[60, 40], 1.0, 1.0, &BTreeSet::new(), 0).is_err());
    }

    #[test]
    fn split_ratio_non_increasing_over_sweep() {
        let c = corpus();
        let (r, _) = vocab_sweep(&c, &c, &[35, 45, 60, 80, 100], 0.0, 0.0, &BTreeSet::new(), 3).unwrap();
        for w in r.table.windows(2) {
            assert!(w[1].1.split_ratio <= w[0].1.split_ratio + 1e-12, "{:?}", r.table);
            assert!(w[1].1.unk_portion <= w[0].1.unk_portion + 1e-12);
        }
    }
}
