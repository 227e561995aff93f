use serde::{Deserialize, Serialize};

use super::losses::{hidden_match_grad, HiddenMatch, ProjectionSet};
use crate::corpus::NluExample;
use crate::encoder::{
    attach_heads, backward_into, forward, soft_cross_entropy_sum, EncoderCheckpoint, ForwardOptions, ForwardTrace,
    Layout, LogitPositions, Upstream, IGNORE,
};
use crate::error::{Error, Result};
use crate::evaluate::{nlu_metrics, NluMetrics};
use crate::finetune::{
    encode_examples, encoder_checksum, head_traces, heads_backward, joint_ce, predict_from_traces, EncodedExample,
    selection_score, EpochLoop, FinetuneConfig, LabelTables, NluModelBundle,
};
use crate::par;
use crate::rng::{self, stream};
use crate::tensor::ParameterSet;
use crate::tokenizer::TokenizerModel;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecipe {
    /// Soft cross-entropy against the teacher's intent distribution.
    #[serde(default = "one")]
    pub intent_soft: f64,
    /// Soft cross-entropy against the teacher's slot distributions, averaged
    /// over each word's first piece.
    #[serde(default = "one")]
    pub slot_soft: f64,
    /// Hard cross-entropy on the gold labels.
    #[serde(default)]
    pub label_ce: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub hidden_match: Option<HiddenMatch>,
}

impl Default for TaskRecipe {
    fn default() -> Self {
        TaskRecipe { intent_soft: 1.0, slot_soft: 1.0, label_ce: 0.0, temperature: 1.0, hidden_match: None }
    }
}

impl TaskRecipe {
    pub fn weights(&self) -> [f64; 4] {
        [self.label_ce, self.intent_soft, self.slot_soft, self.hidden_match.as_ref().map_or(0.0, |h| h.weight)]
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

    fn labels_only() -> Self {
        TaskRecipe { intent_soft: 0.0, slot_soft: 0.0, label_ce: 1.0, temperature: 1.0, hidden_match: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistillConfig {
    #[serde(default)]
    pub recipe: TaskRecipe,
    /// Epochs, batch size, learning rate, head shape and execution. Seeds
    /// other than `seed` are ignored.
    pub train: FinetuneConfig,
    #[serde(default = "one_u64")]
    pub seed: u64,
    /// Label-only fine-tuning epochs after distillation; 0 skips it.
    #[serde(default)]
    pub finetune_epochs: usize,
    /// Fine-tuning of the task teacher when a pipeline prepares it; `train`
    /// when absent.
    #[serde(default)]
    pub teacher_train: Option<FinetuneConfig>,
}

impl TaskDistillConfig {
    pub fn teacher_config(&self) -> &FinetuneConfig {
        self.teacher_train.as_ref().unwrap_or(&self.train)
    }
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Clone)]
pub struct TaskDistillOutcome {
    pub bundle: NluModelBundle,
    pub val: NluMetrics,
    /// Mean per-example total loss of each distillation epoch.
    pub epoch_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub projections: ProjectionSet,
}

struct TeacherOut {
    intent: Vec<f64>,
    slots: Vec<f64>,
    trace: Option<ForwardTrace>,
}

#[allow(clippy::too_many_arguments)]
fn task_grad(
    p: &ParameterSet,
    cfg: &crate::encoder::EncoderConfig,
    r: &TaskRecipe,
    ex: &EncodedExample,
    t: &TeacherOut,
    (ni, nt): (usize, usize),
    dropout_seed: u64,
    scale: f64,
    g: &mut ParameterSet,
) -> Result<[f64; 5]> {
    let opts = ForwardOptions::train(dropout_seed).logits(LogitPositions::None);
    let s = forward(p, cfg, &ex.utt.ids, None, &opts)?;
    let heads = head_traces(p, cfg, &s)?;
    let (li, ls, mut gi, mut gs) = joint_ce(&heads, ex, ni, nt, scale * r.label_ce)?;
    let (si, dsi) = soft_cross_entropy_sum(&heads.0.logits, &t.intent, ni, r.temperature, &[0])?;
    gi.iter_mut().zip(&dsi).for_each(|(a, b)| *a += scale * r.intent_soft * b);
    let rows: Vec<usize> = (0..ex.slot_labels.len()).filter(|&i| ex.slot_labels[i] != IGNORE).collect();
    let (ss, dss) = soft_cross_entropy_sum(&heads.1.logits, &t.slots, nt, r.temperature, &rows)?;
    let inv = 1.0 / rows.len().max(1) as f64;
    gs.iter_mut().zip(&dss).for_each(|(a, b)| *a += scale * r.slot_soft * inv * b);
    let (hid, d_hidden) = match (&r.hidden_match, &t.trace) {
        (Some(h), Some(tt)) => {
            let (l, dh, dp) = hidden_match_grad(&s, tt, &h.layer_map, p, scale * h.weight)?;
            for (j, d) in dp {
                g.data_mut(j).iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
            (l, dh)
        }
        _ => (0.0, Vec::new()),
    };
    let d_final = heads_backward(p, cfg, &s, &heads, &gi, &gs, g)?;
    backward_into(p, cfg, &s, &Upstream { d_logits: None, d_final: Some(&d_final), d_hidden: &d_hidden }, g)?;
    let w = r.weights();
    let total = w[0] * (li + ls) + w[1] * si + w[2] * ss * inv + w[3] * hid;
    Ok([total, li + ls, si, ss * inv, hid])
}

/// Distills a task-fine-tuned teacher into a student encoder on the task
/// inputs: soft intent and slot targets plus optional hidden matching, then
/// optional label-only fine-tuning. The teacher's label tables must be the
/// ones the training split induces.
pub fn distill_task(
    teacher: &NluModelBundle,
    student: &EncoderCheckpoint,
    tok: &TokenizerModel,
    train: &[NluExample],
    val: &[NluExample],
    dc: &TaskDistillConfig,
) -> Result<TaskDistillOutcome> {
    dc.recipe.validate()?;
    let fc = &dc.train;
    fc.validate()?;
    teacher.validate()?;
    let fp = tok.fingerprint();
    teacher.model.require_fingerprint(&fp)?;
    student.require_fingerprint(&fp)?;
    if val.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    let tables = LabelTables::from_examples(train)?;
    tables.check_covers(val)?;
    if tables != teacher.tables {
        return Err(Error::config(format!(
            "teacher labels ({} intents, {} tags) differ from the task's ({} intents, {} tags)",
            teacher.tables.intents.len(),
            teacher.tables.tags.len(),
            tables.intents.len(),
            tables.tags.len()
        )));
    }
    if let Some(h) = &dc.recipe.hidden_match {
        h.validate(student.config.n_layers, teacher.model.config.n_layers)?;
    }

    let mut base = student.config.clone();
    base.heads = None;
    let mut body = student.params.clone();
    body.split_off(Layout::new(&base).encoder_len);
    let (mut params, mut cfg) = attach_heads(&body, &base, tables.head_config(fc.head_width, fc.pooling), dc.seed)?;
    cfg.dropout = fc.dropout;
    let n_model = params.len();
    let map: &[(usize, usize)] = dc.recipe.hidden_match.as_ref().map_or(&[], |h| &h.layer_map);
    let proj = ProjectionSet::new(map, cfg.hidden, teacher.model.config.hidden, rng::derive(dc.seed, &[stream::TASKS]))?;
    let (hs, ht) = (proj.student_hidden, proj.teacher_hidden);
    params.extend(proj.params)?;

    let max_len = cfg.max_len.min(teacher.model.config.max_len);
    let train_enc = encode_examples(tok, &tables, train, max_len)?;
    let val_enc = encode_examples(tok, &tables, val, max_len)?;
    let (ni, nt) = (tables.intents.len(), tables.tags.len());
    let keep_trace = dc.recipe.hidden_match.is_some();
    let teacher_before = teacher.model.params.checksum();
    let cache: Vec<TeacherOut> = par::map(fc.execution, &train_enc, |_, e| {
        let tr = forward(&teacher.model.params, &teacher.model.config, &e.utt.ids, None, &ForwardOptions::eval().logits(LogitPositions::None))?;
        let (hi, hsl) = head_traces(&teacher.model.params, &teacher.model.config, &tr)?;
        Ok(TeacherOut { intent: hi.logits, slots: hsl.logits, trace: keep_trace.then_some(tr) })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let eval_opts = ForwardOptions::eval().logits(LogitPositions::None);
    let score = |p: &ParameterSet| -> Result<Option<f64>> {
        let traces: Vec<ForwardTrace> =
            par::map(fc.execution, &val_enc, |_, e| forward(p, &cfg, &e.utt.ids, None, &eval_opts)).into_iter().collect::<Result<_>>()?;
        let preds = predict_from_traces(p, &cfg, &tables, &val_enc, &traces)?;
        Ok(Some(selection_score(val, &preds)?))
    };
    let epoch_loop = |epochs: usize, seed: u64| EpochLoop {
        epochs,
        batch_size: fc.batch_size,
        lr: fc.lr(),
        adam: &fc.adam,
        seed,
        exec: fc.execution,
        chunk: fc.grad_chunk,
        patience: fc.patience,
        trainable: None,
    };
    let run_with = |params: ParameterSet, r: &TaskRecipe, epochs: usize, seed: u64| {
        epoch_loop(epochs, seed).run(
            params,
            train_enc.len(),
            |p, step, k, i, scale, g| {
                let ds = rng::derive(seed, &[stream::DROPOUT, step, k as u64]);
                task_grad(p, &cfg, r, &train_enc[i], &cache[i], (ni, nt), ds, scale, g)
            },
            score,
        )
    };
    let distilled = run_with(params, &dc.recipe, fc.epochs, dc.seed)?;
    let (mut params, epoch_losses) = (distilled.params, distilled.epoch_losses);
    let mut finetune_losses = Vec::new();
    if dc.finetune_epochs > 0 {
        let ft = run_with(params, &TaskRecipe::labels_only(), dc.finetune_epochs, rng::derive(dc.seed, &[stream::TASKS, 1]))?;
        params = ft.params;
        finetune_losses = ft.epoch_losses;
    }
    if teacher.model.params.checksum() != teacher_before {
        return Err(Error::numeric("task distillation modified the teacher", None));
    }
    let proj = ProjectionSet { student_hidden: hs, teacher_hidden: ht, params: params.split_off(n_model) };

    let traces: Vec<ForwardTrace> =
        par::map(fc.execution, &val_enc, |_, e| forward(&params, &cfg, &e.utt.ids, None, &eval_opts)).into_iter().collect::<Result<_>>()?;
    let preds = predict_from_traces(&params, &cfg, &tables, &val_enc, &traces)?;
    let val_metrics = nlu_metrics(val, &preds)?;
    let source_checksum = encoder_checksum(&student.params, &student.config);
    cfg.dropout = student.config.dropout;
    let bundle = NluModelBundle {
        model: EncoderCheckpoint { config: cfg, params, tokenizer_fingerprint: fp },
        tables,
        source_checksum,
    };
    Ok(TaskDistillOutcome { bundle, val: val_metrics, epoch_losses, finetune_losses, projections: proj })
}
