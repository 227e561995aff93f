use std::path::Path;

use serde::{Deserialize, Serialize};

use super::align::{encode_utterance, LabelTables};
use super::train::head_traces;
use crate::corpus::repair_bio;
use crate::encoder::{forward, save_dir, EncoderCheckpoint, EncoderConfig, ForwardOptions, ForwardTrace, Layout, LogitPositions};
use crate::error::{Error, Result};
use crate::evaluate::Prediction;
use crate::io::{read_json, write_json};
use crate::par::{self, Execution};
use crate::tensor::{argmax, ParameterSet};
use crate::tokenizer::TokenizerModel;

pub const LABELS: &str = "labels.json";
pub const BUNDLE: &str = "bundle.json";

/// Checksum over the encoder tensors only (heads excluded).
pub fn encoder_checksum(params: &ParameterSet, cfg: &EncoderConfig) -> String {
    let mut body = params.clone();
    body.split_off(Layout::new(cfg).encoder_len.min(params.len()));
    body.checksum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    source_checksum: String,
    n_intents: usize,
    n_slot_tags: usize,
}

/// A fine-tuned encoder with its heads and the label tables they index.
#[derive(Debug, Clone)]
pub struct NluModelBundle {
    pub model: EncoderCheckpoint,
    pub tables: LabelTables,
    /// Encoder checksum of the checkpoint this bundle was trained from.
    pub source_checksum: String,
}

impl NluModelBundle {
    pub fn validate(&self) -> Result<()> {
        let hc = self.model.config.heads.as_ref().ok_or_else(|| Error::config("bundle encoder has no heads"))?;
        if hc.n_intents != self.tables.intents.len() || hc.n_slot_tags != self.tables.tags.len() {
            return Err(Error::config("bundle heads do not match its label tables"));
        }
        crate::encoder::check_shapes(&self.model.params, &self.model.config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        save_dir(dir, |tmp| {
            self.model.write_into(tmp)?;
            write_json(&tmp.join(LABELS), &self.tables)?;
            let hc = self.model.config.heads.as_ref().expect("validated");
            write_json(
                &tmp.join(BUNDLE),
                &BundleMeta { source_checksum: self.source_checksum.clone(), n_intents: hc.n_intents, n_slot_tags: hc.n_slot_tags },
            )
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = EncoderCheckpoint::load(dir)?;
        let tables: LabelTables = read_json(&dir.join(LABELS))?;
        let meta: BundleMeta = read_json(&dir.join(BUNDLE))?;
        let b = NluModelBundle { model, tables, source_checksum: meta.source_checksum };
        b.validate()?;
        Ok(b)
    }

    pub fn predict(&self, tok: &TokenizerModel, utterance: &str) -> Result<Prediction> {
        self.model.require_fingerprint(&tok.fingerprint())?;
        self.predict_unchecked(tok, utterance)
    }

    pub fn predict_all<S: AsRef<str> + Sync>(&self, tok: &TokenizerModel, utterances: &[S], exec: Execution) -> Result<Vec<Prediction>> {
        self.model.require_fingerprint(&tok.fingerprint())?;
        par::map(exec, utterances, |_, u| self.predict_unchecked(tok, u.as_ref())).into_iter().collect()
    }

    fn predict_unchecked(&self, tok: &TokenizerModel, utterance: &str) -> Result<Prediction> {
        let cfg = &self.model.config;
        let utt = encode_utterance(tok, utterance, cfg.max_len)?;
        let trace = forward(&self.model.params, cfg, &utt.ids, None, &ForwardOptions::eval().logits(LogitPositions::None))?;
        decode(&self.model.params, cfg, &self.tables, &trace, &utt.word_starts)
    }
}

/// Argmax intent and argmax tags at each word's first piece, then BIO repair.
pub(crate) fn decode(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    tables: &LabelTables,
    trace: &ForwardTrace,
    word_starts: &[usize],
) -> Result<Prediction> {
    let (hi, hs) = head_traces(params, cfg, trace)?;
    let nt = tables.tags.len();
    let intent = tables.intents[argmax(&hi.logits)].clone();
    let mut slots: Vec<String> =
        word_starts.iter().map(|&p| tables.tags[argmax(&hs.logits[p * nt..(p + 1) * nt])].clone()).collect();
    repair_bio(&mut slots);
    Ok(Prediction { intent, slots })
}
