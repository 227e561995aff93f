//! Teacher-student distillation: soft targets and hidden-state matching
//! over segment plans that switch teachers, the teacherless interlude, and
//! task distillation into intent/slot students.

mod losses;
mod plan;
mod run;
mod task;

pub use losses::{hidden_match_loss, soft_cross_entropy, HiddenMatch, ProjectionSet};
pub use plan::{DistillPlan, LoadedPlan, SegmentSpec};
pub use run::{
    distill_run, segment_dir, teacherless_interlude, DistillOutcome, DistillRecord, DistillSegment, DistillSpec,
    LossRecipe, DISTILL_LOG, STUDENT_DIR,
};
pub use task::{distill_task, TaskDistillConfig, TaskDistillOutcome, TaskRecipe};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_nlu, Grammar};
    use crate::encoder::{forward, init_params, EncoderCheckpoint, EncoderConfig, ForwardOptions, LogitPositions};
    use crate::error::Error;
    use crate::pretrain::{encode_sequences, train_mlm, Stage, Start, TrainConfig, TrainSpec};
    use crate::tokenizer::{train_unigram, TokenizerModel};
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::sync::OnceLock;

    struct Fixture {
        tok: TokenizerModel,
        seqs: Vec<Vec<u32>>,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let g = Grammar::preset("assistant").unwrap();
            let utts = g.sample_utterances(200, 3).unwrap();
            let tok = train_unigram(&utts, 120, &BTreeSet::new(), 0).unwrap();
            let seqs = encode_sequences(&tok, &utts, 64);
            Fixture { tok, seqs }
        })
    }

    fn ckpt(layers: usize, hidden: usize, seed: u64) -> EncoderCheckpoint {
        let f = fixture();
        let cfg = EncoderConfig::toy(layers, hidden, f.tok.vocab_size());
        EncoderCheckpoint { params: init_params(&cfg, seed).unwrap(), config: cfg, tokenizer_fingerprint: f.tok.fingerprint() }
    }

    fn entropy(logits: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        logits.iter().map(|v| (v - m).exp() / z).map(|p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
    }

    #[test]
    fn self_distillation_floor_is_teacher_entropy() {
        let t = [0.3, -1.2, 2.0, 0.0];
        let l = soft_cross_entropy(&t, &t, 4, 1.0, &[0]).unwrap();
        assert!((l - entropy(&t)).abs() < 1e-12);
        let s = [0.5, -1.0, 1.5, 0.2];
        assert!(soft_cross_entropy(&s, &t, 4, 1.0, &[0]).unwrap() > l);
    }

    #[test]
    fn one_hot_teacher_gives_hard_cross_entropy() {
        let t = [0.0, 60.0, 0.0];
        let s = [0.4, -0.3, 1.1];
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let hard = lse - s[1];
        assert!((soft_cross_entropy(&s, &t, 3, 1.0, &[0]).unwrap() - hard).abs() < 1e-6);
    }

    #[test]
    fn empty_positions_rejected() {
        assert!(matches!(soft_cross_entropy(&[0.0; 3], &[0.0; 3], 3, 1.0, &[]), Err(Error::Validation(_))));
        assert!(matches!(soft_cross_entropy(&[0.0; 3], &[0.0; 6], 3, 1.0, &[0]), Err(Error::Validation(_))));
    }

    #[test]
    fn soft_ce_gradient_matches_finite_differences() {
        let s = vec![0.2, -0.7, 1.3, 0.5, 0.0, -0.4];
        let t = vec![1.0, 0.1, -0.5, 0.3, 0.8, -1.1];
        let temp = 2.0;
        let (_, g) = crate::encoder::soft_cross_entropy_sum(&s, &t, 3, temp, &[0, 1]).unwrap();
        for i in 0..s.len() {
            let h = 1e-6;
            let (mut a, mut b) = (s.clone(), s.clone());
            a[i] += h;
            b[i] -= h;
            let fa = soft_cross_entropy(&a, &t, 3, temp, &[0, 1]).unwrap() * 2.0;
            let fb = soft_cross_entropy(&b, &t, 3, temp, &[0, 1]).unwrap() * 2.0;
            let fd = (fa - fb) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn soft_ce_is_shift_invariant(s in prop::collection::vec(-5.0f64..5.0, 5), t in prop::collection::vec(-5.0f64..5.0, 5), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let a = soft_cross_entropy(&s, &t, 5, 1.0, &[0]).unwrap();
            let b = soft_cross_entropy(&shifted, &t, 5, 1.0, &[0]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= entropy(&t) - 1e-9);
        }
    }

    fn trace(ck: &EncoderCheckpoint, ids: &[u32]) -> crate::encoder::ForwardTrace {
        forward(&ck.params, &ck.config, ids, None, &ForwardOptions::eval().logits(LogitPositions::None)).unwrap()
    }

    #[test]
    fn hidden_match_identity_and_epsilon() {
        let ck = ckpt(2, 16, 1);
        let ids = &fixture().seqs[0];
        let tr = trace(&ck, ids);
        let map = [(0, 0), (1, 1)];
        let id = ProjectionSet::new(&map, 16, 16, 0).unwrap();
        assert!(id.is_identity());
        assert_eq!(hidden_match_loss(&tr, &tr, &map, &id).unwrap(), 0.0);
        let eps = 0.01;
        let mut shifted = tr.clone();
        shifted.hidden[2].iter_mut().for_each(|v| *v += eps);
        let l = hidden_match_loss(&tr, &shifted, &map, &id).unwrap();
        assert!((l - eps * eps / 2.0).abs() < 1e-15, "{l}");
    }

    #[test]
    fn missing_projection_is_a_config_error() {
        let (s, t) = (ckpt(1, 8, 1), ckpt(2, 16, 2));
        let ids = &fixture().seqs[0];
        let none = ProjectionSet::new(&[], 8, 16, 0).unwrap();
        assert!(matches!(hidden_match_loss(&trace(&s, ids), &trace(&t, ids), &[(0, 1)], &none), Err(Error::Config(_))));
        let some = ProjectionSet::new(&[(0, 1)], 8, 16, 0).unwrap();
        assert!(hidden_match_loss(&trace(&s, ids), &trace(&t, ids), &[(0, 1)], &some).unwrap() > 0.0);
    }

    #[test]
    fn layer_map_bounds() {
        let ok = HiddenMatch { layer_map: vec![(0, 3), (1, 7), (2, 11), (3, 15)], weight: 1.0 };
        assert!(ok.validate(4, 16).is_ok());
        let bad = HiddenMatch { layer_map: vec![(0, 3), (1, 7), (2, 11), (3, 16)], weight: 1.0 };
        assert!(matches!(bad.validate(4, 16), Err(Error::Config(_))));
        let dup = HiddenMatch { layer_map: vec![(0, 3), (0, 7)], weight: 1.0 };
        assert!(matches!(dup.validate(4, 16), Err(Error::Config(_))));
    }

    #[test]
    fn recipe_validation() {
        let zero = LossRecipe { mlm_ce: 0.0, soft_ce: 0.0, ..Default::default() };
        assert!(matches!(zero.validate(), Err(Error::Validation(_))));
        let neg = LossRecipe { soft_ce: -1.0, ..Default::default() };
        assert!(matches!(neg.validate(), Err(Error::Config(_))));
        let cold = LossRecipe { temperature: 0.0, ..Default::default() };
        assert!(matches!(cold.validate(), Err(Error::Config(_))));
        let t = TaskRecipe { intent_soft: 0.0, slot_soft: 0.0, ..Default::default() };
        assert!(matches!(t.validate(), Err(Error::Validation(_))));
    }

    fn tc(steps: u64) -> TrainConfig {
        TrainConfig { batch_tokens: 128, ..TrainConfig::toy(steps, 5) }
    }

    fn segments(updates: [u64; 2], hidden: bool) -> Vec<DistillSegment> {
        let f = fixture();
        let hm = hidden.then(|| HiddenMatch { layer_map: vec![(0, 1)], weight: 0.5 });
        vec![
            DistillSegment {
                teacher: ckpt(2, 16, 11),
                train: f.seqs[20..110].to_vec(),
                updates: updates[0],
                recipe: LossRecipe { hidden_match: hm.clone(), ..Default::default() },
            },
            DistillSegment {
                teacher: ckpt(2, 16, 12),
                train: f.seqs[110..].to_vec(),
                updates: updates[1],
                recipe: LossRecipe { mlm_ce: 0.5, soft_ce: 2.0, temperature: 2.0, hidden_match: hm, all_positions: true },
            },
        ]
    }

    #[test]
    fn distill_run_contracts() {
        let f = fixture();
        let student = EncoderConfig::toy(1, 8, f.tok.vocab_size());
        let fp = f.tok.fingerprint();
        let t = tc(6);
        let dir = tempfile::tempdir().unwrap();
        let spec = DistillSpec { student: &student, train: &t, fingerprint: &fp, out_dir: Some(dir.path()) };
        let segs = segments([3, 3], true);
        let before: Vec<String> = segs.iter().map(|s| s.teacher.params.checksum()).collect();
        let out = distill_run(&spec, &segs, &f.seqs[..20], None).unwrap();
        let after: Vec<String> = segs.iter().map(|s| s.teacher.params.checksum()).collect();
        assert_eq!(before, after);
        assert_eq!(out.step, 6);
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.boundaries[0].1, out.boundaries[1].0);
        assert_eq!(out.boundaries[1].1, out.params.checksum());
        assert_eq!(out.projections.len(), 2);
        assert_eq!(out.projections[0].params.len(), 1);
        assert_eq!(out.params.len(), init_params(&student, 5).unwrap().len());
        for (rec, w) in out.log.iter().zip([segs[0].recipe.weights(); 3].into_iter().chain([segs[1].recipe.weights(); 3])) {
            let sum = w[0] * rec.mlm_ce + w[1] * rec.soft_ce + w[2] * rec.hidden;
            assert!((rec.total - sum).abs() < 1e-9, "{rec:?}");
            assert!(rec.hidden > 0.0);
        }
        assert!(out.log[2].val_perplexity.is_some() && out.log[0].val_perplexity.is_none());
        assert!(dir.path().join("segment-0").is_dir() && dir.path().join(STUDENT_DIR).is_dir());
        let logged = crate::io::read_jsonl::<DistillRecord>(&dir.path().join(DISTILL_LOG)).unwrap();
        assert_eq!(logged, out.log);
        let saved = EncoderCheckpoint::load(&dir.path().join(STUDENT_DIR)).unwrap();
        assert_eq!(saved.params.checksum(), out.params.checksum());
    }

    #[test]
    fn zero_updates_return_the_initial_student() {
        let f = fixture();
        let student = EncoderConfig::toy(1, 8, f.tok.vocab_size());
        let fp = f.tok.fingerprint();
        let t = tc(0);
        let spec = DistillSpec { student: &student, train: &t, fingerprint: &fp, out_dir: None };
        let out = distill_run(&spec, &segments([0, 0], false), &f.seqs[..20], None).unwrap();
        assert_eq!(out.params.checksum(), init_params(&student, 5).unwrap().checksum());
        assert!(out.log.is_empty());
    }

    #[test]
    fn mismatched_tokenizer_and_bad_map_are_config_errors() {
        let f = fixture();
        let student = EncoderConfig::toy(1, 8, f.tok.vocab_size());
        let t = tc(2);
        let spec = DistillSpec { student: &student, train: &t, fingerprint: "other", out_dir: None };
        assert!(matches!(distill_run(&spec, &segments([1, 1], false), &f.seqs[..20], None), Err(Error::Config(_))));
        let fp = f.tok.fingerprint();
        let spec = DistillSpec { student: &student, train: &t, fingerprint: &fp, out_dir: None };
        let mut segs = segments([1, 1], false);
        segs[0].recipe.hidden_match = Some(HiddenMatch { layer_map: vec![(0, 2)], weight: 1.0 });
        assert!(matches!(distill_run(&spec, &segs, &f.seqs[..20], None), Err(Error::Config(_))));
    }

    #[test]
    fn interlude_delegates_to_masked_lm_training() {
        let f = fixture();
        let inter = ckpt(1, 8, 3);
        let t = tc(4);
        let a = teacherless_interlude(&inter, &f.seqs[20..], &f.seqs[..20], &t, None).unwrap();
        let spec = TrainSpec { encoder: &inter.config, train: &t, stage: Stage::Stage2, fingerprint: &inter.tokenizer_fingerprint, out_dir: None };
        let b = train_mlm(&spec, &f.seqs[20..], &f.seqs[..20], Start::Params(inter.params.clone()), None).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let z = teacherless_interlude(&inter, &f.seqs[20..], &f.seqs[..20], &tc(0), None).unwrap();
        assert_eq!(z.params.checksum(), inter.params.checksum());
    }

    #[test]
    fn plan_file_roundtrip_and_io_errors() {
        let f = fixture();
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        f.tok.save(&d.join("tok.model")).unwrap();
        ckpt(2, 16, 11).save(&d.join("teacher")).unwrap();
        let lines = |r: std::ops::Range<usize>| {
            let g = Grammar::preset("assistant").unwrap();
            g.sample_utterances(r.len(), r.start as u64).unwrap().join("\n")
        };
        std::fs::write(d.join("train.txt"), lines(0..60)).unwrap();
        std::fs::write(d.join("val.txt"), lines(60..70)).unwrap();
        let student = EncoderConfig::toy(1, 8, f.tok.vocab_size());
        let plan = DistillPlan {
            tokenizer: "tok.model".into(),
            student,
            init: None,
            val_corpus: "val.txt".into(),
            train: tc(2),
            segments: vec![SegmentSpec { teacher: "teacher".into(), corpus: "train.txt".into(), updates: 2, recipe: LossRecipe::default() }],
        };
        std::fs::write(d.join("plan.toml"), plan.to_toml()).unwrap();
        let loaded = DistillPlan::load(&d.join("plan.toml")).unwrap();
        assert_eq!(loaded.segments[0].teacher, d.join("teacher"));
        assert_eq!(loaded.total_updates(), 2);
        let out = loaded.run(Some(&d.join("out"))).unwrap();
        assert_eq!(out.step, 2);

        let mut missing = loaded.clone();
        missing.segments[0].teacher = d.join("nope");
        assert!(matches!(missing.run(None), Err(Error::Io { .. })));
        assert!(matches!(DistillPlan::from_toml("segments = 3", d), Err(Error::Config(_))));
    }

    fn nlu_setup() -> (TokenizerModel, crate::corpus::NluSplits, EncoderCheckpoint, EncoderCheckpoint) {
        let g = Grammar::preset("assistant").unwrap();
        let s = generate_synthetic_nlu(&g, 30, 12, 12, 4).unwrap();
        let utts = g.sample_utterances(300, 8).unwrap();
        let texts: Vec<String> = s.train.iter().map(|e| e.utterance.clone()).chain(utts.iter().cloned()).collect();
        let tok = train_unigram(&texts, 120, &BTreeSet::new(), 0).unwrap();
        let fp = tok.fingerprint();
        let mk = |layers, hidden, seed| {
            let cfg = EncoderConfig::toy(layers, hidden, tok.vocab_size());
            EncoderCheckpoint { params: init_params(&cfg, seed).unwrap(), config: cfg, tokenizer_fingerprint: fp.clone() }
        };
        let (t, st) = (mk(2, 16, 1), mk(1, 8, 2));
        (tok, s, t, st)
    }

    #[test]
    fn task_distillation_contracts() {
        use crate::finetune::{finetune_seed, FinetuneConfig, FinetuneMode};
        let (tok, s, teacher_ck, student) = nlu_setup();
        let fc = FinetuneConfig { head_width: 16, batch_size: 8, epochs: 2, peak_lr: Some(1e-3), ..FinetuneConfig::new(FinetuneMode::Full) };
        let teacher = finetune_seed(&teacher_ck, &tok, &s.train, &s.val, &fc, 1).unwrap().bundle;
        let before = teacher.model.params.checksum();
        let dc = TaskDistillConfig {
            recipe: TaskRecipe { hidden_match: Some(HiddenMatch { layer_map: vec![(0, 1)], weight: 1.0 }), ..Default::default() },
            train: fc.clone(),
            seed: 1,
            finetune_epochs: 1,
            teacher_train: None,
        };
        let out = distill_task(&teacher, &student, &tok, &s.train, &s.val, &dc).unwrap();
        assert_eq!(teacher.model.params.checksum(), before);
        assert_eq!(out.epoch_losses.len(), 2);
        assert_eq!(out.finetune_losses.len(), 1);
        assert_eq!(out.projections.params.len(), 1);
        assert_eq!(out.bundle.model.config.hidden, 8);
        out.bundle.validate().unwrap();
        assert!(out.bundle.predict(&tok, &s.val[0].utterance).is_ok());

        let mut other = s.train.clone();
        other[0].intent = "SomethingNew".into();
        assert!(matches!(distill_task(&teacher, &student, &tok, &other, &s.val, &dc), Err(Error::Config(_))));
        let zero = TaskDistillConfig { recipe: TaskRecipe { intent_soft: 0.0, slot_soft: 0.0, ..Default::default() }, ..dc };
        assert!(matches!(distill_task(&teacher, &student, &tok, &s.train, &s.val, &zero), Err(Error::Validation(_))));
    }
}
