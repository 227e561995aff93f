//! Corpus engineering: language-balanced sampling, square-root
//! deduplication, sentence packing, spoken-form conversion, mixtures and
//! synthetic NLU data.

mod nlu;
mod prep;
mod sample;
mod spoken;
pub mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nlu::{
    generate_synthetic_nlu, BioTag, Grammar, IntentSpec, NluExample, NluSplits, SlotChunk,
};
pub use prep::{dedup_sqrt, expand_counts, filter_min_tokens, pack_sentences, PackedSequence};
pub use sample::{
    compute_language_distribution, mix_corpora, sample_corpus, LanguageDistribution,
};
pub use spoken::{spoken_form_transform, BasicRules, EnglishRules, SpokenFormRegistry, SpokenFormRules};
pub use nlu::{bio_well_formed, chunks, repair_bio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Spoken,
    Written,
}

fn one() -> u64 {
    1
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextExample {
    pub text: String,
    pub language: String,
    pub form: Form,
    pub source: String,
    /// Observed repetitions of this exact record.
    #[serde(default = "one")]
    pub count: u64,
}

impl TextExample {
    pub fn new(text: impl Into<String>, language: impl Into<String>, form: Form, source: impl Into<String>) -> Self {
        TextExample {
            text: text.into(),
            language: language.into(),
            form,
            source: source.into(),
            count: 1,
        }
    }

    pub fn with_count(mut self, count: u64) -> Self {
        self.count = count;
        self
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::validation("record text is empty"));
        }
        if self.count == 0 {
            return Err(Error::validation(format!(
                "record `{}` has count 0",
                self.text
            )));
        }
        Ok(())
    }
}

/// Checks record invariants and that every language belongs to `languages`.
pub fn validate_records(records: &[TextExample], languages: &BTreeSet<String>) -> Result<()> {
    for r in records {
        r.validate()?;
        if !languages.contains(&r.language) {
            return Err(Error::validation(format!(
                "language `{}` is not in the configured set",
                r.language
            )));
        }
    }
    Ok(())
}

/// Reads a corpus file: JSON lines of records when the extension is
/// `jsonl`, otherwise one written example per nonblank line.
pub fn read_corpus(path: &std::path::Path) -> Result<Vec<TextExample>> {
    let records = if path.extension().is_some_and(|e| e == "jsonl") {
        match crate::io::read_jsonl::<TextExample>(path) {
            Ok(r) => r,
            // NLU files contribute their utterances as spoken in-domain text.
            Err(e @ Error::Format { .. }) => match crate::io::read_jsonl::<NluExample>(path) {
                Ok(nlu) => nlu.into_iter().map(|x| TextExample::new(x.utterance, "en", Form::Spoken, "nlu")).collect(),
                Err(_) => return Err(e),
            },
            Err(e) => return Err(e),
        }
    } else {
        crate::io::read_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| TextExample::new(l.trim(), "und", Form::Written, "file"))
            .collect()
    };
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// Reads NLU examples (JSON lines with `utterance`, `intent`, `slots`).
pub fn read_nlu(path: &std::path::Path) -> Result<Vec<NluExample>> {
    let records = crate::io::read_jsonl::<NluExample>(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_json_defaults_count() {
        let r: TextExample =
            serde_json::from_str(r#"{"text":"hi there","language":"en","form":"written","source":"t"}"#)
                .unwrap();
        assert_eq!(r.count, 1);
        assert_eq!(r.word_count(), 2);
    }

    #[test]
    fn record_validation() {
        let langs: BTreeSet<String> = ["en".to_string()].into();
        let ok = TextExample::new("a", "en", Form::Spoken, "s");
        assert!(validate_records(std::slice::from_ref(&ok), &langs).is_ok());
        assert!(validate_records(&[ok.clone().with_count(0)], &langs).is_err());
        assert!(validate_records(&[TextExample::new(" ", "en", Form::Spoken, "s")], &langs).is_err());
        assert!(validate_records(&[TextExample::new("a", "fr", Form::Spoken, "s")], &langs).is_err());
    }
}
