use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::manifest::{hash_paths, manifest_path, run_id, RunManifest, WorkdirLock};
use super::recipe::PipelineRecipe;
use super::report::{report, REPORTS_DIR};
use crate::corpus::synth::{in_domain_log, GeneralGrammar};
use crate::corpus::{
    dedup_sqrt, expand_counts, generate_synthetic_nlu, mix_corpora, pack_sentences, read_corpus, read_nlu,
    spoken_form_transform, Form, Grammar, NluExample, TextExample,
};
use crate::distill::{distill_run, distill_task, DistillSegment, DistillSpec, TaskDistillConfig, STUDENT_DIR};
use crate::encoder::{init_params, EncoderCheckpoint, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluate::{build_mask_fill_tasks, ensure_held_out, mask_fill_accuracy, nlu_metrics, perplexity, EvalReport, NluMetrics};
use crate::finetune::{finetune, summarize, FinetuneConfig, MetricSummary, NluModelBundle};
use crate::io::{read_json, sha256_hex, write_json, write_jsonl};
use crate::pretrain::{encode_sequences, latest_checkpoint, train_mlm, Stage, Start, TrainConfig, TrainSpec, LATEST};
use crate::rng::{self, stream};
use crate::tensor::ParameterSet;
use crate::tokenizer::{train_unigram, TokenizerModel};

pub const STAGES: [&str; 10] =
    ["data", "tokenizer", "stage1", "stage2", "intermediate", "interlude", "final", "finetune", "task_distill", "evaluate"];

const STAGE1_CORPUS: &str = "data/stage1.jsonl";
const STAGE2_CORPUS: &str = "data/stage2.jsonl";
const VAL_GENERAL: &str = "data/val_general.jsonl";
const VAL_DOMAIN: &str = "data/val_domain.jsonl";
const NLU_TRAIN: &str = "data/nlu_train.jsonl";
const NLU_VAL: &str = "data/nlu_val.jsonl";
const NLU_TEST: &str = "data/nlu_test.jsonl";
const TOKENIZER: &str = "tokenizer/tokenizer.model";
const STAGE1_MODEL: &str = "stage1/model";
const STAGE2_MODEL: &str = "stage2/model";
const INTERMEDIATE_MODEL: &str = "intermediate/student";
const INTERLUDE_MODEL: &str = "interlude/model";
const STUDENT_MODEL: &str = "final/student";
const SUMMARY: &str = "summary.json";

/// Deliberate interruption, used to exercise resume. Pretraining stages
/// stop after `step` updates (leaving a resumable checkpoint); other stages
/// stop after their work but before their manifest is written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Halt {
    pub stage: String,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub halt: Option<Halt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    /// Optimizer updates executed in this invocation.
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifests: Vec<RunManifest>,
    pub stages: Vec<StageOutcome>,
    pub halted: Option<String>,
    pub report: Option<String>,
}

impl PipelineRun {
    pub fn steps_executed(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

/// Per-seed validation and test metrics of a fine-tuning style stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub val: BTreeMap<String, MetricSummary>,
    pub test: BTreeMap<String, MetricSummary>,
}

struct StageResult {
    steps: u64,
    halted: bool,
}

struct Runner<'a> {
    wd: &'a Path,
    recipe: &'a PipelineRecipe,
    opts: &'a PipelineOptions,
    tok: Option<TokenizerModel>,
    manifests: Vec<RunManifest>,
    stages: Vec<StageOutcome>,
}

fn done(steps: u64) -> Result<StageResult> {
    Ok(StageResult { steps, halted: false })
}

fn texts(records: &[TextExample]) -> Vec<String> {
    records.iter().map(|r| r.text.clone()).collect()
}

impl Runner<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.wd.join(rel)
    }

    fn tok(&mut self) -> Result<&TokenizerModel> {
        if self.tok.is_none() {
            self.tok = Some(TokenizerModel::load(&self.path(TOKENIZER))?);
        }
        Ok(self.tok.as_ref().expect("loaded"))
    }

    fn seqs(&mut self, rel: &str, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let records = read_corpus(&self.path(rel))?;
        Ok(encode_sequences(self.tok()?, &texts(&records), max_len))
    }

    fn model(&self, rel: &str) -> Result<EncoderCheckpoint> {
        EncoderCheckpoint::load(&self.path(rel))
    }

    fn nlu(&self) -> Result<[Vec<NluExample>; 3]> {
        Ok([read_nlu(&self.path(NLU_TRAIN))?, read_nlu(&self.path(NLU_VAL))?, read_nlu(&self.path(NLU_TEST))?])
    }

    fn halts(&self, stage: &str) -> Option<u64> {
        self.opts.halt.as_ref().filter(|h| h.stage == stage).map(|h| h.step)
    }

    /// Runs `body` unless a current manifest already covers the stage.
    /// Returns false when the pipeline should stop.
    fn stage<C: Serialize>(
        &mut self,
        name: &str,
        inputs: &[&str],
        outputs: &[String],
        config: &C,
        seeds: Vec<u64>,
        body: impl FnOnce(&mut Self) -> Result<StageResult>,
    ) -> Result<bool> {
        let wrap = |e: Error| e.in_stage(name);
        let inputs: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
        let in_hashes = hash_paths(self.wd, &inputs).map_err(wrap)?;
        let config = serde_json::to_value(config).expect("stage config serializes");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let mpath = manifest_path(self.wd, name);
        if mpath.exists() {
            let m = RunManifest::load(&mpath).map_err(wrap)?;
            m.check_current(self.wd, &in_hashes, &config_hash).map_err(wrap)?;
            self.stages.push(StageOutcome { stage: name.into(), skipped: true, steps: 0 });
            self.manifests.push(m);
            return Ok(true);
        }
        let t0 = Instant::now();
        let r = body(self).map_err(wrap)?;
        self.stages.push(StageOutcome { stage: name.into(), skipped: false, steps: r.steps });
        if r.halted || self.halts(name).is_some() {
            return Ok(false);
        }
        let m = RunManifest {
            run_id: run_id(name, &config_hash, &in_hashes),
            stage: name.into(),
            inputs: in_hashes,
            config,
            config_hash,
            seeds,
            outputs: hash_paths(self.wd, outputs).map_err(wrap)?,
            wall_clock_secs: t0.elapsed().as_secs_f64(),
            steps: r.steps,
        };
        m.write_new(self.wd).map_err(wrap)?;
        self.manifests.push(m);
        Ok(true)
    }

    fn pretrain(
        &mut self,
        name: &str,
        cfg: &EncoderConfig,
        tc: &TrainConfig,
        stage: Stage,
        init: ParameterSet,
        train: &[Vec<u32>],
        val: &[Vec<u32>],
    ) -> Result<StageResult> {
        let dir = self.path(name);
        let train_dir = dir.join("train");
        let start = if train_dir.join(LATEST).exists() { Start::Resume(latest_checkpoint(&train_dir)?) } else { Start::Params(init) };
        let mut run_tc = tc.clone();
        let halted = match self.halts(name) {
            Some(step) if step < tc.max_steps => {
                run_tc.max_steps = step;
                true
            }
            _ => false,
        };
        let fp = self.tok()?.fingerprint();
        let spec = TrainSpec { encoder: cfg, train: &run_tc, stage, fingerprint: &fp, out_dir: Some(&train_dir) };
        let out = train_mlm(&spec, train, val, start, None)?;
        if !halted {
            EncoderCheckpoint { config: cfg.clone(), params: out.params, tokenizer_fingerprint: fp }.save(&dir.join("model"))?;
        }
        Ok(StageResult { steps: out.loss_trace.len() as u64, halted })
    }

    fn data(&mut self) -> Result<StageResult> {
        let recipe = self.recipe;
        let d = &recipe.data;
        let seed = recipe.seed;
        let english = GeneralGrammar::english();
        let written = english.generate(d.general_sentences + d.general_val, seed);
        let (val_general, train_written) = written.split_at(d.general_val);
        let mixed = if d.spoken_fraction > 0.0 {
            let spoken = train_written
                .iter()
                .map(|r| {
                    let mut s = r.clone();
                    s.text = spoken_form_transform(&r.text, &r.language)?;
                    s.form = Form::Spoken;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            let parts = [(train_written.to_vec(), 1.0 - d.spoken_fraction), (spoken, d.spoken_fraction)];
            mix_corpora(&parts, train_written.len(), rng::derive(seed, &[stream::SAMPLE, 1]))?
        } else {
            train_written.to_vec()
        };
        let stage1: Vec<TextExample> = if d.pack_words > 0 {
            pack_sentences(&mixed, d.pack_words)?
                .into_iter()
                .map(|p| TextExample::new(p.text, p.language, Form::Written, "packed"))
                .collect()
        } else {
            mixed
        };
        let grammar = Grammar::preset(&d.grammar)?;
        let log = in_domain_log(&grammar, &english.language, d.in_domain_utterances, seed)?;
        let mut seen: HashSet<String> = log.iter().map(|r| r.text.clone()).collect();
        let val_domain: Vec<TextExample> = grammar
            .sample_utterances(20 * d.in_domain_val, rng::derive(seed, &[stream::SAMPLE, 2]))?
            .into_iter()
            .filter(|u| seen.insert(u.clone()))
            .take(d.in_domain_val)
            .map(|u| TextExample::new(u, &english.language, Form::Spoken, "inhouse"))
            .collect();
        if val_domain.is_empty() {
            return Err(Error::Generation("no held-out in-domain utterances left for validation".into()));
        }
        let domain = expand_counts(&dedup_sqrt(&log));
        let share = d.stage2_in_domain_share;
        let stage2 = mix_corpora(&[(domain, share), (stage1.clone(), 1.0 - share)], d.stage2_size, rng::derive(seed, &[stream::SAMPLE, 3]))?;
        let nlu = generate_synthetic_nlu(&grammar, d.nlu_train, d.nlu_val, d.nlu_test, rng::derive(seed, &[stream::TASKS]))?;
        write_jsonl(&self.path(STAGE1_CORPUS), &stage1)?;
        write_jsonl(&self.path(STAGE2_CORPUS), &stage2)?;
        write_jsonl(&self.path(VAL_GENERAL), val_general)?;
        write_jsonl(&self.path(VAL_DOMAIN), &val_domain)?;
        write_jsonl(&self.path(NLU_TRAIN), &nlu.train)?;
        write_jsonl(&self.path(NLU_VAL), &nlu.val)?;
        write_jsonl(&self.path(NLU_TEST), &nlu.test)?;
        done(0)
    }

    fn tokenizer(&mut self) -> Result<StageResult> {
        let recipe = self.recipe;
        let spec = recipe.tokenizer.as_ref().expect("validated");
        let out = self.path(TOKENIZER);
        let tok = match (&spec.path, spec.vocab_size) {
            (Some(p), _) => TokenizerModel::load(p)?,
            (None, Some(v)) => {
                let mut corpus = texts(&read_corpus(&self.path(STAGE1_CORPUS))?);
                corpus.extend(texts(&read_corpus(&self.path(STAGE2_CORPUS))?));
                let forced: BTreeSet<String> = spec.forced.iter().cloned().collect();
                train_unigram(&corpus, v, &forced, recipe.seed)?
            }
            (None, None) => unreachable!("validated"),
        };
        tok.save(&out)?;
        self.tok = Some(tok);
        done(0)
    }

    fn vocab(&mut self) -> Result<usize> {
        Ok(self.tok()?.vocab_size())
    }

    fn seed_summary(runs: &[(u64, NluMetrics, NluMetrics)]) -> SeedSummary {
        SeedSummary {
            seeds: runs.iter().map(|r| r.0).collect(),
            val: summarize(&runs.iter().map(|r| r.1.clone()).collect::<Vec<_>>()),
            test: summarize(&runs.iter().map(|r| r.2.clone()).collect::<Vec<_>>()),
        }
    }

    fn test_metrics(&mut self, bundle: &NluModelBundle, test: &[NluExample], fc: &FinetuneConfig) -> Result<NluMetrics> {
        let utts: Vec<&str> = test.iter().map(|e| e.utterance.as_str()).collect();
        let preds = bundle.predict_all(self.tok()?, &utts, fc.execution)?;
        nlu_metrics(test, &preds)
    }

    fn finetune_stage(&mut self) -> Result<StageResult> {
        let recipe = self.recipe;
        let fc = &recipe.finetune;
        let student = self.model(STUDENT_MODEL)?;
        let [train, val, test] = self.nlu()?;
        let tok = self.tok()?.clone();
        let sum = finetune(&student, &tok, &train, &val, fc)?;
        let mut runs = Vec::new();
        let mut steps = 0;
        for r in &sum.runs {
            r.bundle.save(&self.path(&format!("finetune/seed-{}", r.seed)))?;
            runs.push((r.seed, r.val.clone(), self.test_metrics(&r.bundle, &test, fc)?));
            steps += (r.epoch_losses.len() * train.len().div_ceil(fc.batch_size)) as u64;
        }
        write_json(&self.path(&format!("finetune/{SUMMARY}")), &Self::seed_summary(&runs))?;
        done(steps)
    }

    fn task_distill_stage(&mut self, dc: &TaskDistillConfig) -> Result<StageResult> {
        let fc = &dc.train;
        let teacher_ck = self.model(INTERLUDE_MODEL)?;
        let student = self.model(STUDENT_MODEL)?;
        let [train, val, test] = self.nlu()?;
        let tok = self.tok()?.clone();
        let tc = dc.teacher_config();
        let teacher = crate::finetune::finetune_seed(&teacher_ck, &tok, &train, &val, tc, dc.seed)?;
        teacher.bundle.save(&self.path("task_distill/teacher"))?;
        let mut runs = Vec::new();
        let mut steps = (teacher.epoch_losses.len() * train.len().div_ceil(tc.batch_size)) as u64;
        for &s in &fc.seeds {
            let cfg = TaskDistillConfig { seed: s, ..dc.clone() };
            let out = distill_task(&teacher.bundle, &student, &tok, &train, &val, &cfg)?;
            out.bundle.save(&self.path(&format!("task_distill/seed-{s}")))?;
            runs.push((s, out.val.clone(), self.test_metrics(&out.bundle, &test, fc)?));
            steps += ((out.epoch_losses.len() + out.finetune_losses.len()) * train.len().div_ceil(fc.batch_size)) as u64;
        }
        write_json(&self.path(&format!("task_distill/{SUMMARY}")), &Self::seed_summary(&runs))?;
        done(steps)
    }

    fn evaluate_stage(&mut self) -> Result<StageResult> {
        let recipe = self.recipe;
        let ev = &recipe.evaluate;
        let masking = recipe.stage1.masking;
        let [train, val, test] = self.nlu()?;
        let tok = self.tok()?.clone();
        let general = read_corpus(&self.path(VAL_GENERAL))?;
        let stage1_texts = texts(&read_corpus(&self.path(STAGE1_CORPUS))?);
        let lexicon = BTreeMap::from([(GeneralGrammar::english().language.clone(), GeneralGrammar::english().noun_lexicon())]);
        let dir = self.path(REPORTS_DIR);
        let mut reports = Vec::new();
        for (name, rel) in [
            ("stage1", STAGE1_MODEL),
            ("stage2", STAGE2_MODEL),
            ("intermediate", INTERMEDIATE_MODEL),
            ("interlude", INTERLUDE_MODEL),
            ("student", STUDENT_MODEL),
        ] {
            let ck = self.model(rel)?;
            let ml = ck.config.max_len;
            let exec = ev.frozen.execution;
            let mut r = EvalReport::new(name);
            let dom = self.seqs(VAL_DOMAIN, ml)?;
            let gen = self.seqs(VAL_GENERAL, ml)?;
            r.set("perplexity", perplexity(&ck.params, &ck.config, &dom, &masking, ev.mask_seed, exec)?)?;
            r.set("perplexity_general", perplexity(&ck.params, &ck.config, &gen, &masking, ev.mask_seed, exec)?)?;
            let (tasks, _) = build_mask_fill_tasks(&general, &lexicon, &tok, ml, ev.mask_seed)?;
            ensure_held_out(&tasks, &stage1_texts)?;
            r.set("mask_fill_acc", mask_fill_accuracy(&ck.params, &ck.config, &tasks, exec)?)?;
            let sum = finetune(&ck, &tok, &train, &val, &ev.frozen)?;
            let tests = sum.runs.iter().map(|run| self.test_metrics(&run.bundle, &test, &ev.frozen)).collect::<Result<Vec<_>>>()?;
            for (k, m) in summarize(&tests) {
                r.set(&k, m.mean)?;
            }
            r.seeds = ev.frozen.seeds.clone();
            reports.push(r);
        }
        for (name, stage) in [("student_finetuned", "finetune"), ("student_task_distilled", "task_distill")] {
            let p = self.path(&format!("{stage}/{SUMMARY}"));
            if !p.exists() {
                continue;
            }
            let s: SeedSummary = read_json(&p)?;
            let mut r = EvalReport::new(name);
            for (k, m) in &s.test {
                r.set(k, m.mean)?;
            }
            r.seeds = s.seeds;
            reports.push(r);
        }
        for r in &reports {
            write_json(&dir.join(format!("{}.json", r.checkpoint)), r)?;
        }
        done(0)
    }
}

fn model_outputs(rel: &str) -> Vec<String> {
    vec![rel.to_string()]
}

/// Runs every stage of `recipe` in `workdir`, skipping stages whose
/// manifest is current, then writes the report.
pub fn run_pipeline(recipe: &PipelineRecipe, workdir: &Path, opts: &PipelineOptions) -> Result<PipelineRun> {
    recipe.validate()?;
    if let Some(h) = &opts.halt {
        if !STAGES.contains(&h.stage.as_str()) {
            return Err(Error::config(format!("unknown stage `{}`", h.stage)));
        }
    }
    let _lock = WorkdirLock::acquire(workdir)?;
    let mut rn = Runner { wd: workdir, recipe, opts, tok: None, manifests: Vec::new(), stages: Vec::new() };
    let r = recipe;
    let data_outputs: Vec<String> =
        [STAGE1_CORPUS, STAGE2_CORPUS, VAL_GENERAL, VAL_DOMAIN, NLU_TRAIN, NLU_VAL, NLU_TEST].iter().map(|s| s.to_string()).collect();
    let halted = |rn: Runner<'_>, stage: &str| PipelineRun {
        manifests: rn.manifests,
        stages: rn.stages,
        halted: Some(stage.to_string()),
        report: None,
    };

    if !rn.stage("data", &[], &data_outputs, &(&r.data, r.seed), vec![r.seed], Runner::data)? {
        return Ok(halted(rn, "data"));
    }
    let tok_inputs: &[&str] = if r.tokenizer.as_ref().is_some_and(|t| t.path.is_some()) { &[] } else { &[STAGE1_CORPUS, STAGE2_CORPUS] };
    let tok_cfg = (&r.tokenizer, r.tokenizer.as_ref().and_then(|t| t.path.as_ref()).map(|p| crate::io::content_hash(p)).transpose()?);
    if !rn.stage("tokenizer", tok_inputs, &model_outputs(TOKENIZER), &tok_cfg, vec![r.seed], Runner::tokenizer)? {
        return Ok(halted(rn, "tokenizer"));
    }
    let vocab = rn.vocab()?;
    let teacher = r.teacher.config(vocab);
    let inter = r.intermediate.config(vocab);
    let student = r.student.config(vocab);

    let ok = rn.stage(
        "stage1",
        &[TOKENIZER, STAGE1_CORPUS, VAL_GENERAL],
        &model_outputs(STAGE1_MODEL),
        &(&teacher, &r.stage1),
        vec![r.stage1.seed],
        |rn| {
            let train = rn.seqs(STAGE1_CORPUS, teacher.max_len)?;
            let val = rn.seqs(VAL_GENERAL, teacher.max_len)?;
            let init = init_params(&teacher, r.stage1.seed)?;
            rn.pretrain("stage1", &teacher, &r.stage1, Stage::Stage1, init, &train, &val)
        },
    )?;
    if !ok {
        return Ok(halted(rn, "stage1"));
    }
    let ok = rn.stage(
        "stage2",
        &[TOKENIZER, STAGE1_MODEL, STAGE2_CORPUS, VAL_DOMAIN],
        &model_outputs(STAGE2_MODEL),
        &r.stage2,
        vec![r.stage2.seed],
        |rn| {
            let s1 = rn.model(STAGE1_MODEL)?;
            let train = rn.seqs(STAGE2_CORPUS, s1.config.max_len)?;
            let val = rn.seqs(VAL_DOMAIN, s1.config.max_len)?;
            let cfg = s1.config.clone();
            rn.pretrain("stage2", &cfg, &r.stage2, Stage::Stage2, s1.params, &train, &val)
        },
    )?;
    if !ok {
        return Ok(halted(rn, "stage2"));
    }
    let ok = rn.stage(
        "intermediate",
        &[TOKENIZER, STAGE1_MODEL, STAGE2_MODEL, STAGE1_CORPUS, STAGE2_CORPUS, VAL_DOMAIN],
        &model_outputs(INTERMEDIATE_MODEL),
        &(&inter, &r.intermediate_distill),
        vec![r.intermediate_distill.train.seed],
        |rn| {
            let ds = &r.intermediate_distill;
            let ml = inter.max_len;
            let segments = vec![
                DistillSegment { teacher: rn.model(STAGE1_MODEL)?, train: rn.seqs(STAGE1_CORPUS, ml)?, updates: ds.updates[0], recipe: ds.recipe.clone() },
                DistillSegment { teacher: rn.model(STAGE2_MODEL)?, train: rn.seqs(STAGE2_CORPUS, ml)?, updates: ds.updates[1], recipe: ds.recipe.clone() },
            ];
            let val = rn.seqs(VAL_DOMAIN, ml)?;
            let fp = rn.tok()?.fingerprint();
            let dir = rn.path("intermediate");
            let spec = DistillSpec { student: &inter, train: &ds.train, fingerprint: &fp, out_dir: Some(&dir) };
            let out = distill_run(&spec, &segments, &val, None)?;
            debug_assert!(dir.join(STUDENT_DIR).is_dir());
            done(out.step)
        },
    )?;
    if !ok {
        return Ok(halted(rn, "intermediate"));
    }
    let ok = rn.stage(
        "interlude",
        &[TOKENIZER, INTERMEDIATE_MODEL, STAGE2_CORPUS, VAL_DOMAIN],
        &model_outputs(INTERLUDE_MODEL),
        &r.interlude,
        vec![r.interlude.seed],
        |rn| {
            let m = rn.model(INTERMEDIATE_MODEL)?;
            let train = rn.seqs(STAGE2_CORPUS, m.config.max_len)?;
            let val = rn.seqs(VAL_DOMAIN, m.config.max_len)?;
            let cfg = m.config.clone();
            rn.pretrain("interlude", &cfg, &r.interlude, Stage::Stage2, m.params, &train, &val)
        },
    )?;
    if !ok {
        return Ok(halted(rn, "interlude"));
    }
    let ok = rn.stage(
        "final",
        &[TOKENIZER, INTERLUDE_MODEL, STAGE2_CORPUS, VAL_DOMAIN],
        &model_outputs(STUDENT_MODEL),
        &(&student, &r.final_distill),
        vec![r.final_distill.train.seed],
        |rn| {
            let ds = &r.final_distill;
            let ml = student.max_len;
            let segments =
                vec![DistillSegment { teacher: rn.model(INTERLUDE_MODEL)?, train: rn.seqs(STAGE2_CORPUS, ml)?, updates: ds.updates[0], recipe: ds.recipe.clone() }];
            let val = rn.seqs(VAL_DOMAIN, ml)?;
            let fp = rn.tok()?.fingerprint();
            let dir = rn.path("final");
            let spec = DistillSpec { student: &student, train: &ds.train, fingerprint: &fp, out_dir: Some(&dir) };
            done(distill_run(&spec, &segments, &val, None)?.step)
        },
    )?;
    if !ok {
        return Ok(halted(rn, "final"));
    }
    let nlu_inputs = [TOKENIZER, STUDENT_MODEL, NLU_TRAIN, NLU_VAL, NLU_TEST];
    let ft_outputs: Vec<String> =
        r.finetune.seeds.iter().map(|s| format!("finetune/seed-{s}")).chain([format!("finetune/{SUMMARY}")]).collect();
    if !rn.stage("finetune", &nlu_inputs, &ft_outputs, &r.finetune, r.finetune.seeds.clone(), Runner::finetune_stage)? {
        return Ok(halted(rn, "finetune"));
    }
    let mut eval_inputs = vec![TOKENIZER, STAGE1_MODEL, STAGE2_MODEL, INTERMEDIATE_MODEL, INTERLUDE_MODEL, STUDENT_MODEL];
    eval_inputs.extend([STAGE1_CORPUS, VAL_GENERAL, VAL_DOMAIN, NLU_TRAIN, NLU_VAL, NLU_TEST]);
    let ft_summary = format!("finetune/{SUMMARY}");
    eval_inputs.push(&ft_summary);
    let td_summary = format!("task_distill/{SUMMARY}");
    if let Some(dc) = &r.task_distill {
        let outs: Vec<String> = dc
            .train
            .seeds
            .iter()
            .map(|s| format!("task_distill/seed-{s}"))
            .chain(["task_distill/teacher".to_string(), td_summary.clone()])
            .collect();
        let inputs = [TOKENIZER, INTERLUDE_MODEL, STUDENT_MODEL, NLU_TRAIN, NLU_VAL, NLU_TEST];
        if !rn.stage("task_distill", &inputs, &outs, dc, dc.train.seeds.clone(), |rn| rn.task_distill_stage(dc))? {
            return Ok(halted(rn, "task_distill"));
        }
        eval_inputs.push(&td_summary);
    }
    let names = ["stage1", "stage2", "intermediate", "interlude", "student", "student_finetuned"]
        .into_iter()
        .chain(r.task_distill.as_ref().map(|_| "student_task_distilled"));
    let eval_outputs: Vec<String> = names.map(|n| format!("{REPORTS_DIR}/{n}.json")).collect();
    let eval_cfg = (&r.evaluate, &r.stage1.masking);
    if !rn.stage("evaluate", &eval_inputs, &eval_outputs, &eval_cfg, r.evaluate.frozen.seeds.clone(), Runner::evaluate_stage)? {
        return Ok(halted(rn, "evaluate"));
    }
    let text = report(workdir, Some(&r.evaluate.baseline)).map_err(|e| e.in_stage("report"))?;
    Ok(PipelineRun { manifests: rn.manifests, stages: rn.stages, halted: None, report: Some(text) })
}
