use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::losses::{hidden_match_grad, HiddenMatch, ProjectionSet};
use crate::encoder::{
    backward_into, check_shapes, forward, init_params, mlm_loss_sum, soft_cross_entropy_sum, EncoderCheckpoint,
    EncoderConfig, ForwardOptions, LogitPositions, Upstream,
};
use crate::error::{Error, Result};
use crate::evaluate::perplexity;
use crate::io::{append_line, write_atomic};
use crate::pretrain::{
    accumulate_gradients, mask_for_training, optimizer_step, stage2_continue, AdamState, BatchPlan, Masked, TrainConfig,
    TrainOutcome,
};
use crate::rng::{self, stream};
use crate::tensor::ParameterSet;

fn one() -> f64 {
    1.0
}

/// Loss weights for one distillation segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecipe {
    #[serde(default = "one")]
    pub mlm_ce: f64,
    #[serde(default = "one")]
    pub soft_ce: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub hidden_match: Option<HiddenMatch>,
    /// Soft targets at every position rather than only the masked ones.
    #[serde(default)]
    pub all_positions: bool,
}

impl Default for LossRecipe {
    fn default() -> Self {
        LossRecipe { mlm_ce: 1.0, soft_ce: 1.0, temperature: 1.0, hidden_match: None, all_positions: false }
    }
}

impl LossRecipe {
    pub fn weights(&self) -> [f64; 3] {
        [self.mlm_ce, self.soft_ce, self.hidden_match.as_ref().map_or(0.0, |h| h.weight)]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::validation("every loss weight is zero"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// One phase of a distillation run: a teacher, its corpus and an update
/// budget.
#[derive(Debug, Clone)]
pub struct DistillSegment {
    pub teacher: EncoderCheckpoint,
    pub train: Vec<Vec<u32>>,
    pub updates: u64,
    pub recipe: LossRecipe,
}

pub struct DistillSpec<'a> {
    pub student: &'a EncoderConfig,
    /// Schedule, optimizer, batching, masking and seed. The schedule runs
    /// over the summed segment budgets; `max_steps` is ignored.
    pub train: &'a TrainConfig,
    pub fingerprint: &'a str,
    pub out_dir: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub step: u64,
    pub segment: usize,
    pub lr: f64,
    pub mlm_ce: f64,
    pub soft_ce: f64,
    pub hidden: f64,
    pub total: f64,
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub params: ParameterSet,
    /// Final projections of each segment (empty when widths agree).
    pub projections: Vec<ProjectionSet>,
    pub step: u64,
    /// One record per update, plus validation at evaluation points.
    pub log: Vec<DistillRecord>,
    /// Student checksum at the start and end of each segment.
    pub boundaries: Vec<(String, String)>,
    pub checkpoints: Vec<PathBuf>,
}

pub const DISTILL_LOG: &str = "distill.jsonl";
pub const STUDENT_DIR: &str = "student";

pub fn segment_dir(k: usize) -> String {
    format!("segment-{k}")
}

fn check_segment(spec: &DistillSpec<'_>, k: usize, seg: &DistillSegment) -> Result<()> {
    let ctx = |e: Error| match e {
        Error::Config(m) => Error::config(format!("segment {k}: {m}")),
        Error::Validation(m) => Error::validation(format!("segment {k}: {m}")),
        other => other,
    };
    seg.teacher.require_fingerprint(spec.fingerprint).map_err(ctx)?;
    if seg.teacher.config.vocab_size != spec.student.vocab_size {
        return Err(ctx(Error::config("teacher and student vocabularies differ")));
    }
    check_shapes(&seg.teacher.params, &seg.teacher.config).map_err(ctx)?;
    seg.recipe.validate().map_err(ctx)?;
    if let Some(h) = &seg.recipe.hidden_match {
        h.validate(spec.student.n_layers, seg.teacher.config.n_layers).map_err(ctx)?;
    }
    if seg.updates > 0 && seg.train.is_empty() {
        return Err(ctx(Error::validation("corpus is empty")));
    }
    Ok(())
}

/// Distills a student through consecutive teacher segments. Teachers run in
/// eval mode and are never modified; the student and its optimizer state
/// carry across segment boundaries, projections are per segment.
pub fn distill_run(
    spec: &DistillSpec<'_>,
    segments: &[DistillSegment],
    val: &[Vec<u32>],
    init: Option<ParameterSet>,
) -> Result<DistillOutcome> {
    let tc = spec.train;
    tc.validate()?;
    let mut cfg = spec.student.clone();
    cfg.dropout = tc.dropout;
    cfg.validate()?;
    for (k, seg) in segments.iter().enumerate() {
        check_segment(spec, k, seg)?;
    }
    if val.is_empty() {
        return Err(Error::validation("validation corpus is empty"));
    }
    let mut params = match init {
        Some(p) => {
            check_shapes(&p, &cfg)?;
            p
        }
        None => init_params(&cfg, tc.seed)?,
    };
    let n_student = params.len();
    let mut opt = AdamState::new(&params);
    let v = cfg.vocab_size;
    let eval = |p: &ParameterSet| perplexity(p, &cfg, val, &tc.masking, tc.eval_mask_seed, tc.execution);
    if let Some(dir) = spec.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(DISTILL_LOG), b"")?;
    }
    let emit = |rec: &DistillRecord| -> Result<()> {
        match spec.out_dir {
            Some(dir) => append_line(&dir.join(DISTILL_LOG), &serde_json::to_string(rec).expect("serializable")),
            None => Ok(()),
        }
    };
    let save = |name: &str, p: &ParameterSet| -> Result<Option<PathBuf>> {
        let Some(dir) = spec.out_dir else { return Ok(None) };
        let path = dir.join(name);
        EncoderCheckpoint { config: spec.student.clone(), params: p.clone(), tokenizer_fingerprint: spec.fingerprint.to_string() }
            .save(&path)?;
        Ok(Some(path))
    };

    let mut step = 0u64;
    let mut log = Vec::new();
    let mut boundaries = Vec::new();
    let mut projections = Vec::new();
    let mut checkpoints = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let start = params.checksum();
        let r = &seg.recipe;
        let map: &[(usize, usize)] = r.hidden_match.as_ref().map_or(&[], |h| &h.layer_map);
        let proj = ProjectionSet::new(map, cfg.hidden, seg.teacher.config.hidden, rng::derive(tc.seed, &[si as u64]))?;
        let (hs, ht) = (proj.student_hidden, proj.teacher_hidden);
        // Projections ride behind the student tensors for the segment.
        params.extend(proj.params)?;
        opt.m.extend(params.zeros_like().split_off(n_student))?;
        opt.v.extend(params.zeros_like().split_off(n_student))?;
        let zeros = params.zeros_like();
        let mut plan = match seg.updates {
            0 => None,
            _ => Some(BatchPlan::new(
                seg.train.iter().map(Vec::len).collect(),
                tc.batch_tokens,
                rng::derive(tc.seed, &[stream::ORDER, si as u64]),
            )?),
        };
        for local in 0..seg.updates {
            let idx = plan.as_mut().expect("plan exists when updates > 0").next_batch();
            let masked: Vec<Masked> = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| mask_for_training(&seg.train[i], &tc.masking, v, rng::derive(tc.seed, &[stream::MASK, step, k as u64])))
                .collect::<Result<_>>()?;
            let n_masked: usize = masked.iter().map(|m| m.positions().len()).sum();
            let n_soft = if r.all_positions { masked.iter().map(|m| m.input.len()).sum() } else { n_masked };
            let b = masked.len() as f64;
            let (wce, ws) = (r.mlm_ce / n_masked as f64, r.soft_ce / n_soft as f64);
            let wh = r.weights()[2] / b;
            let p = &params;
            let (parts, mut grads) = accumulate_gradients(tc.execution, &masked, tc.grad_chunk, &zeros, |k, m, g| {
                let rows = if r.all_positions { LogitPositions::All } else { LogitPositions::Only(m.positions()) };
                let t = forward(&seg.teacher.params, &seg.teacher.config, &m.input, None, &ForwardOptions::eval().logits(rows.clone()))?;
                let sopts = ForwardOptions::train(rng::derive(tc.seed, &[stream::DROPOUT, step, k as u64])).logits(rows);
                let s = forward(p, &cfg, &m.input, None, &sopts)?;
                let (ce, _, mut d) = mlm_loss_sum(&s, &m.labels, v)?;
                d.iter_mut().for_each(|x| *x *= wce);
                let soft_rows: Vec<usize> = (0..s.logit_positions.len()).collect();
                let (soft, ds) = soft_cross_entropy_sum(&s.mlm_logits, &t.mlm_logits, v, r.temperature, &soft_rows)?;
                d.iter_mut().zip(&ds).for_each(|(a, b)| *a += ws * b);
                let (hid, d_hidden) = match &r.hidden_match {
                    Some(h) => {
                        let (l, dh, dp) = hidden_match_grad(&s, &t, &h.layer_map, p, wh)?;
                        for (j, dpj) in dp {
                            g.data_mut(j).iter_mut().zip(dpj).for_each(|(a, b)| *a += b);
                        }
                        (l, dh)
                    }
                    None => (0.0, Vec::new()),
                };
                backward_into(p, &cfg, &s, &Upstream { d_logits: Some(&d), d_final: None, d_hidden: &d_hidden }, g)?;
                Ok([ce, soft, hid, wce * ce + ws * soft + wh * hid])
            })?;
            if !parts[3].is_finite() {
                return Err(Error::numeric(format!("non-finite distillation loss at step {step}"), None));
            }
            let lr = tc.schedule.lr_at(step);
            optimizer_step(&mut params, &mut grads, &mut opt, lr, &tc.adam, None)?;
            step += 1;
            let seg_end = local + 1 == seg.updates;
            let val_perplexity = if seg_end || (tc.eval_every > 0 && step % tc.eval_every == 0) { Some(eval(&params)?) } else { None };
            let rec = DistillRecord {
                step,
                segment: si,
                lr,
                mlm_ce: parts[0] / n_masked as f64,
                soft_ce: parts[1] / n_soft as f64,
                hidden: parts[2] / b,
                total: parts[3],
                val_perplexity,
            };
            emit(&rec)?;
            log.push(rec);
        }
        opt.m.split_off(n_student);
        opt.v.split_off(n_student);
        let proj = ProjectionSet { student_hidden: hs, teacher_hidden: ht, params: params.split_off(n_student) };
        checkpoints.extend(save(&segment_dir(si), &params)?);
        boundaries.push((start, params.checksum()));
        projections.push(proj);
    }
    checkpoints.extend(save(STUDENT_DIR, &params)?);
    Ok(DistillOutcome { params, projections, step, log, boundaries, checkpoints })
}

/// Continues masked-LM training of an intermediate model on Stage-2 data
/// with no teacher.
pub fn teacherless_interlude(
    intermediate: &EncoderCheckpoint,
    stage2: &[Vec<u32>],
    val: &[Vec<u32>],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    stage2_continue(intermediate, stage2, val, tc, out_dir)
}
