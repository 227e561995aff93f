use serde::{Deserialize, Serialize};

use super::TextExample;
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerModel;

/// Replaces every record's repetition count `c` with `max(1, ⌊√c⌋)`.
pub fn dedup_sqrt(examples: &[TextExample]) -> Vec<TextExample> {
    examples
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.count = r.count.isqrt().max(1);
            r
        })
        .collect()
}

/// Materializes repetition counts: a record with count `c` becomes `c`
/// consecutive records with count 1.
pub fn expand_counts(examples: &[TextExample]) -> Vec<TextExample> {
    let mut out = Vec::new();
    for r in examples {
        for _ in 0..r.count {
            let mut c = r.clone();
            c.count = 1;
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub text: String,
    pub language: String,
    pub word_count: usize,
    /// Indices into the input stream, in packing order.
    pub constituent_ids: Vec<usize>,
}

/// Greedy packing: sentences are appended while the running word count is
/// below `target_words`. A change of language always starts a new sequence.
pub fn pack_sentences(stream: &[TextExample], target_words: usize) -> Result<Vec<PackedSequence>> {
    if target_words == 0 {
        return Err(Error::validation("packing target must be at least one word"));
    }
    let mut out = Vec::new();
    let mut current: Option<PackedSequence> = None;
    for (i, rec) in stream.iter().enumerate() {
        let words = rec.word_count();
        if let Some(cur) = &current {
            if cur.language != rec.language || cur.word_count >= target_words {
                out.push(current.take().expect("checked"));
            }
        }
        match &mut current {
            Some(cur) => {
                cur.text.push(' ');
                cur.text.push_str(rec.text.trim());
                cur.word_count += words;
                cur.constituent_ids.push(i);
            }
            None => {
                current = Some(PackedSequence {
                    text: rec.text.trim().to_string(),
                    language: rec.language.clone(),
                    word_count: words,
                    constituent_ids: vec![i],
                })
            }
        }
    }
    out.extend(current);
    Ok(out)
}

/// Keeps records whose tokenized length (excluding sequence delimiters) is
/// at least `min_tokens`.
pub fn filter_min_tokens(stream: &[TextExample], tokenizer: &TokenizerModel, min_tokens: usize) -> Vec<TextExample> {
    stream
        .iter()
        .filter(|r| tokenizer.encode(&r.text).len() >= min_tokens)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Form;
    use proptest::prelude::*;

    fn rec(text: &str) -> TextExample {
        TextExample::new(text, "en", Form::Written, "t")
    }

    #[test]
    fn sqrt_dedup_fixtures() {
        let out = dedup_sqrt(&[rec("a").with_count(100), rec("b"), rec("c").with_count(10)]);
        assert_eq!(out.iter().map(|r| r.count).collect::<Vec<_>>(), vec![10, 1, 3]);
        assert_eq!(out[0].text, "a");
    }

    #[test]
    fn expand_materializes_counts() {
        let out = expand_counts(&[rec("a").with_count(3), rec("b")]);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r.count == 1));
    }

    #[test]
    fn packing_fixtures() {
        let p = pack_sentences(&[rec("a b"), rec("c d")], 3).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].text, "a b c d");
        assert_eq!(p[0].word_count, 4);

        let p = pack_sentences(&[rec("a b c")], 3).unwrap();
        assert_eq!((p.len(), p[0].word_count), (1, 3));

        let p = pack_sentences(&[rec("a b c"), rec("d")], 3).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].constituent_ids, vec![1]);

        assert!(pack_sentences(&[rec("a")], 0).is_err());
        assert!(pack_sentences(&[], 5).unwrap().is_empty());
    }

    #[test]
    fn packing_splits_on_language_change() {
        let mut fr = rec("x y");
        fr.language = "fr".into();
        let p = pack_sentences(&[rec("a"), fr, rec("b")], 100).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[1].language, "fr");
    }

    fn arb_stream() -> impl Strategy<Value = Vec<TextExample>> {
        proptest::collection::vec(
            (proptest::collection::vec("[a-z]{1,5}", 1..8), prop_oneof![Just("en"), Just("fr")]),
            0..40,
        )
        .prop_map(|recs| {
            recs.into_iter()
                .map(|(words, lang)| TextExample::new(words.join(" "), lang, Form::Written, "p"))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn double_dedup_is_fourth_root(count in 1u64..10_000_000) {
            let once = dedup_sqrt(&[rec("x").with_count(count)]);
            let twice = dedup_sqrt(&once);
            // integer fourth root by search
            let mut r = 0u64;
            while (r + 1).pow(4) <= count { r += 1; }
            prop_assert_eq!(twice[0].count, r.max(1));
        }

        #[test]
        fn packing_preserves_content(stream in arb_stream(), target in 1usize..20) {
            let packed = pack_sentences(&stream, target).unwrap();
            let joined_in: String = stream.iter().flat_map(|r| r.text.split_whitespace()).collect();
            let joined_out: String = packed.iter().flat_map(|p| p.text.split_whitespace()).collect();
            prop_assert_eq!(joined_in, joined_out);
            let ids: Vec<usize> = packed.iter().flat_map(|p| p.constituent_ids.clone()).collect();
            prop_assert_eq!(ids, (0..stream.len()).collect::<Vec<_>>());
            for p in &packed {
                prop_assert!(p.constituent_ids.iter().all(|&i| stream[i].language == p.language));
                let last = stream[*p.constituent_ids.last().unwrap()].word_count();
                prop_assert!(p.word_count <= target + last);
                prop_assert_eq!(p.word_count, p.text.split_whitespace().count());
            }
        }
    }
}
