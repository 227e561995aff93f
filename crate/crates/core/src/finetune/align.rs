use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::NluExample;
use crate::encoder::{HeadConfig, Pooling, IGNORE};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenizerModel, BOS, EOS, UNK};

pub const OUTSIDE: &str = "O";

/// Intent names and BIO tags in sorted order; a label's id is its index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTables {
    pub intents: Vec<String>,
    pub tags: Vec<String>,
}

impl LabelTables {
    pub fn from_examples(train: &[NluExample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::validation("training split is empty"));
        }
        let mut intents = BTreeSet::new();
        let mut tags = BTreeSet::from([OUTSIDE.to_string()]);
        for e in train {
            e.validate()?;
            intents.insert(e.intent.clone());
            tags.extend(e.slots.iter().cloned());
        }
        Ok(LabelTables { intents: intents.into_iter().collect(), tags: tags.into_iter().collect() })
    }

    pub fn intent_id(&self, name: &str) -> Result<usize> {
        self.intents
            .binary_search_by(|x| x.as_str().cmp(name))
            .map_err(|_| Error::validation(format!("intent `{name}` is not in the training label table")))
    }

    pub fn tag_id(&self, tag: &str) -> Result<usize> {
        self.tags
            .binary_search_by(|x| x.as_str().cmp(tag))
            .map_err(|_| Error::validation(format!("slot tag `{tag}` is not in the training label table")))
    }

    /// Fails on the first example whose intent or tags are outside the tables.
    pub fn check_covers(&self, examples: &[NluExample]) -> Result<()> {
        for e in examples {
            self.intent_id(&e.intent)?;
            for t in &e.slots {
                self.tag_id(t)?;
            }
        }
        Ok(())
    }

    pub fn head_config(&self, width: usize, pooling: Pooling) -> HeadConfig {
        HeadConfig { n_intents: self.intents.len(), n_slot_tags: self.tags.len(), width, pooling }
    }
}

/// Token ids `<s> pieces </s>` and the position of each word's first piece.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedUtterance {
    pub ids: Vec<u32>,
    pub word_starts: Vec<usize>,
}

pub fn encode_utterance(tok: &TokenizerModel, text: &str, max_len: usize) -> Result<EncodedUtterance> {
    let mut ids = vec![BOS];
    let mut word_starts = Vec::new();
    for w in text.split_whitespace() {
        let mut pieces = tok.encode_word(w);
        if pieces.is_empty() {
            pieces.push(UNK);
        }
        word_starts.push(ids.len());
        ids.extend(pieces);
    }
    if word_starts.is_empty() {
        return Err(Error::validation("utterance is empty"));
    }
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(Error::validation(format!(
            "utterance `{text}` needs {} tokens, more than max_len {max_len}",
            ids.len()
        )));
    }
    Ok(EncodedUtterance { ids, word_starts })
}

/// An utterance with its intent id and per-position slot labels; only the
/// first piece of each word is supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub utt: EncodedUtterance,
    pub intent: usize,
    pub slot_labels: Vec<i64>,
}

pub fn encode_examples(
    tok: &TokenizerModel,
    tables: &LabelTables,
    examples: &[NluExample],
    max_len: usize,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            e.validate()?;
            let utt = encode_utterance(tok, &e.utterance, max_len)?;
            let mut slot_labels = vec![IGNORE; utt.ids.len()];
            for (&p, t) in utt.word_starts.iter().zip(&e.slots) {
                slot_labels[p] = tables.tag_id(t)? as i64;
            }
            Ok(EncodedExample { intent: tables.intent_id(&e.intent)?, utt, slot_labels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_unigram;
    use proptest::prelude::*;

    fn ex(u: &str, i: &str, s: &str) -> NluExample {
        NluExample { utterance: u.into(), intent: i.into(), slots: s.split_whitespace().map(String::from).collect() }
    }

    fn tok() -> &'static TokenizerModel {
        static TOK: std::sync::OnceLock<TokenizerModel> = std::sync::OnceLock::new();
        TOK.get_or_init(|| {
            let texts: Vec<String> = ["play some jazz music", "set an alarm for seven", "turn the lights off please"].map(String::from).to_vec();
            train_unigram(&texts, 40, &BTreeSet::new(), 0).unwrap()
        })
    }

    #[test]
    fn tables_are_sorted_and_include_outside() {
        let t = LabelTables::from_examples(&[ex("play jazz", "Play", "O B-genre"), ex("stop", "Stop", "O")]).unwrap();
        assert_eq!(t.intents, vec!["Play", "Stop"]);
        assert_eq!(t.tags, vec!["B-genre", "O"]);
        assert_eq!(t.tag_id("O").unwrap(), 1);
        assert!(t.check_covers(&[ex("go", "Go", "O")]).is_err());
        assert!(t.check_covers(&[ex("play x", "Play", "O B-artist")]).is_err());
    }

    #[test]
    fn first_piece_carries_the_label() {
        let tok = tok();
        let t = LabelTables::from_examples(&[ex("play jazz music", "Play", "O B-genre O")]).unwrap();
        let enc = encode_examples(tok, &t, &[ex("play jazz music", "Play", "O B-genre O")], 64).unwrap();
        let e = &enc[0];
        assert_eq!(e.utt.ids[0], BOS);
        assert_eq!(*e.utt.ids.last().unwrap(), EOS);
        let labeled: Vec<usize> = (0..e.slot_labels.len()).filter(|&i| e.slot_labels[i] != IGNORE).collect();
        assert_eq!(labeled, e.utt.word_starts);
        assert_eq!(e.slot_labels[e.utt.word_starts[1]], t.tag_id("B-genre").unwrap() as i64);
    }

    #[test]
    fn empty_and_overlong_utterances_fail() {
        let tok = tok();
        assert!(matches!(encode_utterance(tok, "   ", 64), Err(Error::Validation(_))));
        assert!(matches!(encode_utterance(tok, "play some jazz music", 4), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn one_start_per_word(words in proptest::collection::vec("[a-z]{1,9}", 1..8)) {
            let text = words.join(" ");
            let e = encode_utterance(&tok(), &text, 512).unwrap();
            prop_assert_eq!(e.word_starts.len(), words.len());
            prop_assert!(e.word_starts.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*e.word_starts.last().unwrap() < e.ids.len() - 1);
        }
    }
}
