//! Intent classification and slot filling on top of an encoder checkpoint,
//! in full fine-tune or frozen-encoder mode.

mod align;
mod bundle;
mod train;

pub use align::{encode_examples, encode_utterance, EncodedExample, EncodedUtterance, LabelTables, OUTSIDE};
pub use bundle::{encoder_checksum, NluModelBundle, BUNDLE, LABELS};
pub use train::{
    finetune, finetune_seed, summarize, FinetuneConfig, FinetuneMode, FinetuneSummary, MetricSummary, SeedRun, FROZEN_LR,
    FULL_LR,
};
#[allow(unused_imports)]
pub(crate) use train::{head_traces, heads_backward, joint_ce, predict_from_traces, selection_score, EpochLoop};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_nlu, Grammar, NluSplits};
    use crate::encoder::{init_params, EncoderCheckpoint, EncoderConfig};
    use crate::error::Error;
    use crate::evaluate::exact_match_error;
    use crate::tokenizer::{train_unigram, TokenizerModel};
    use std::collections::BTreeSet;

    fn setup(n_train: usize) -> (TokenizerModel, EncoderCheckpoint, NluSplits) {
        let g = Grammar::preset("assistant").unwrap();
        let splits = generate_synthetic_nlu(&g, n_train, 20, 20, 4).unwrap();
        let texts: Vec<String> = splits.train.iter().chain(&splits.val).map(|e| e.utterance.clone()).collect();
        let tok = train_unigram(&texts, 150, &BTreeSet::new(), 0).unwrap();
        let cfg = EncoderConfig::toy(1, 16, tok.vocab_size());
        let ck = EncoderCheckpoint { params: init_params(&cfg, 1).unwrap(), config: cfg, tokenizer_fingerprint: tok.fingerprint() };
        (tok, ck, splits)
    }

    fn small(mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig { head_width: 16, batch_size: 8, epochs: 3, ..FinetuneConfig::new(mode) }
    }

    #[test]
    fn frozen_mode_keeps_encoder_bytes() {
        let (tok, ck, s) = setup(40);
        let run = finetune_seed(&ck, &tok, &s.train, &s.val, &small(FinetuneMode::Frozen), 1).unwrap();
        assert_eq!(encoder_checksum(&run.bundle.model.params, &run.bundle.model.config), encoder_checksum(&ck.params, &ck.config));
        assert_eq!(run.bundle.source_checksum, encoder_checksum(&ck.params, &ck.config));
        let full = finetune_seed(&ck, &tok, &s.train, &s.val, &FinetuneConfig { peak_lr: Some(1e-3), ..small(FinetuneMode::Full) }, 1).unwrap();
        assert_ne!(encoder_checksum(&full.bundle.model.params, &full.bundle.model.config), run.bundle.source_checksum);
    }

    #[test]
    fn full_mode_memorizes_a_small_task() {
        use crate::pretrain::{encode_sequences, train_mlm, Stage, Start, TrainConfig, TrainSpec};
        let g = Grammar::preset("assistant").unwrap();
        let s = generate_synthetic_nlu(&g, 24, 20, 20, 4).unwrap();
        let utts = g.sample_utterances(600, 9).unwrap();
        let texts: Vec<String> = s.train.iter().map(|e| e.utterance.clone()).chain(utts.iter().cloned()).collect();
        let tok = train_unigram(&texts, 150, &BTreeSet::new(), 0).unwrap();
        let cfg = EncoderConfig::toy(1, 32, tok.vocab_size());
        let seqs = encode_sequences(&tok, &utts, cfg.max_len);
        let tc = TrainConfig::toy(600, 1);
        let fp = tok.fingerprint();
        let spec = TrainSpec { encoder: &cfg, train: &tc, stage: Stage::Stage1, fingerprint: &fp, out_dir: None };
        let pre = train_mlm(&spec, &seqs[50..], &seqs[..50], Start::Params(init_params(&cfg, 1).unwrap()), None).unwrap();
        let ck = EncoderCheckpoint { params: pre.params, config: cfg, tokenizer_fingerprint: fp };

        let fc = FinetuneConfig {
            peak_lr: Some(3e-3),
            epochs: 20,
            dropout: 0.0,
            batch_size: 4,
            ..FinetuneConfig::new(FinetuneMode::Full)
        };
        let run = finetune_seed(&ck, &tok, &s.train, &s.train, &fc, 2).unwrap();
        assert_eq!(run.val.exact_match_error, 0.0, "losses {:?}", run.epoch_losses);
        let utterances: Vec<&str> = s.train.iter().map(|e| e.utterance.as_str()).collect();
        let preds = run.bundle.predict_all(&tok, &utterances, Default::default()).unwrap();
        assert_eq!(exact_match_error(&s.train, &preds).unwrap(), 0.0);
        assert_eq!(preds[0].intent, s.train[0].intent);
        assert_eq!(preds[0].slots, s.train[0].slots);
    }

    #[test]
    fn three_seeds_summarized_and_loss_falls() {
        let (tok, ck, s) = setup(40);
        let fc = FinetuneConfig { peak_lr: Some(1e-3), ..small(FinetuneMode::Full) };
        let sum = finetune(&ck, &tok, &s.train, &s.val, &fc).unwrap();
        assert_eq!(sum.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        let em = &sum.metrics["exact_match_error"];
        assert_eq!(em.values.len(), 3);
        assert!((em.mean - em.values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        for r in &sum.runs {
            assert!(r.epoch_losses[2] < r.epoch_losses[0], "seed {}: {:?}", r.seed, r.epoch_losses);
        }
    }

    #[test]
    fn unknown_validation_label_is_rejected() {
        let (tok, ck, s) = setup(20);
        let mut val = s.val.clone();
        val[0].intent = "NeverSeen".into();
        let r = finetune_seed(&ck, &tok, &s.train, &val, &small(FinetuneMode::Frozen), 1);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn predict_contract_and_bundle_roundtrip() {
        let (tok, ck, s) = setup(20);
        let b = finetune_seed(&ck, &tok, &s.train, &s.val, &small(FinetuneMode::Frozen), 1).unwrap().bundle;
        let u = &s.val[0].utterance;
        assert_eq!(b.predict(&tok, u).unwrap(), b.predict(&tok, u).unwrap());
        let one = b.predict(&tok, "alarm").unwrap();
        assert_eq!(one.slots.len(), 1);
        assert!(matches!(b.predict(&tok, "  "), Err(Error::Validation(_))));
        assert!(crate::corpus::bio_well_formed(&b.predict(&tok, u).unwrap().slots));

        let dir = tempfile::tempdir().unwrap();
        b.save(&dir.path().join("nlu")).unwrap();
        let back = NluModelBundle::load(&dir.path().join("nlu")).unwrap();
        assert_eq!(back.tables, b.tables);
        assert_eq!(back.predict(&tok, u).unwrap(), b.predict(&tok, u).unwrap());

        let other = train_unigram(&["something else entirely".to_string()], 30, &BTreeSet::new(), 0).unwrap();
        assert!(matches!(b.predict(&other, u), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parsing_and_defaults() {
        assert_eq!("frozen".parse::<FinetuneMode>().unwrap(), FinetuneMode::Frozen);
        assert!("half".parse::<FinetuneMode>().is_err());
        assert_eq!(FinetuneConfig::new(FinetuneMode::Full).lr(), 2e-5);
        assert_eq!(FinetuneConfig::new(FinetuneMode::Frozen).lr(), 1e-3);
        let c = FinetuneConfig::new(FinetuneMode::Frozen);
        assert_eq!(FinetuneConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
