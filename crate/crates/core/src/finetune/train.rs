use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::align::{encode_examples, EncodedExample, LabelTables};
use super::bundle::{encoder_checksum, NluModelBundle};
use crate::corpus::NluExample;
use crate::encoder::{
    attach_heads, backward_into, classify_backward, classify_trace, cross_entropy_sum, forward, EncoderCheckpoint,
    EncoderConfig, ForwardOptions, ForwardTrace, HeadTrace, Layout, LogitPositions, Pooling, Task, Upstream,
};
use crate::error::{Error, Result};
use crate::evaluate::{nlu_metrics, stddev, NluMetrics};
use crate::par::{self, Execution};
use crate::pretrain::{accumulate_gradients, optimizer_step, AdamConfig, AdamState};
use crate::rng::{self, stream};
use crate::tensor::ParameterSet;
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Every parameter is updated.
    Full,
    /// Only the classification heads are updated.
    Frozen,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "frozen" => Ok(FinetuneMode::Frozen),
            _ => Err(Error::config(format!("unknown fine-tune mode `{s}` (expected full or frozen)"))),
        }
    }
}

pub const FULL_LR: f64 = 2e-5;
pub const FROZEN_LR: f64 = 1e-3;

fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_width() -> usize {
    256
}
fn d_dropout() -> f64 {
    0.1
}
fn d_adam() -> AdamConfig {
    AdamConfig { weight_decay: 0.0, ..Default::default() }
}
fn d_chunk() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Constant learning rate; `None` uses the mode default.
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Epochs without a validation exact-match improvement before stopping;
    /// 0 always runs every epoch. The best epoch's weights are kept either way.
    #[serde(default)]
    pub patience: usize,
    #[serde(default = "d_width")]
    pub head_width: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_adam")]
    pub adam: AdamConfig,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default = "d_chunk")]
    pub grad_chunk: usize,
}

impl FinetuneConfig {
    pub fn new(mode: FinetuneMode) -> Self {
        FinetuneConfig {
            mode,
            peak_lr: None,
            batch_size: d_batch(),
            epochs: d_epochs(),
            seeds: d_seeds(),
            patience: 0,
            head_width: d_width(),
            pooling: Pooling::default(),
            dropout: d_dropout(),
            adam: d_adam(),
            execution: Execution::default(),
            grad_chunk: d_chunk(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.peak_lr.unwrap_or(match self.mode {
            FinetuneMode::Full => FULL_LR,
            FinetuneMode::Frozen => FROZEN_LR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::config("fine-tune learning rate must be positive"));
        }
        if self.batch_size == 0 || self.head_width == 0 {
            return Err(Error::config("batch_size and head_width must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout outside [0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fine-tune config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: FinetuneConfig = toml::from_str(text).map_err(|e| Error::config(format!("fine-tune config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Intent and slot head outputs for one trace.
pub(crate) fn head_traces(params: &ParameterSet, cfg: &EncoderConfig, trace: &ForwardTrace) -> Result<(HeadTrace, HeadTrace)> {
    Ok((classify_trace(params, cfg, trace, Task::Intent)?, classify_trace(params, cfg, trace, Task::Slots)?))
}

/// Backpropagates head-logit gradients, returning the summed gradient on
/// the final hidden states.
pub(crate) fn heads_backward(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    trace: &ForwardTrace,
    heads: &(HeadTrace, HeadTrace),
    d_intent: &[f64],
    d_slots: &[f64],
    grads: &mut ParameterSet,
) -> Result<Vec<f64>> {
    let mut d = classify_backward(params, cfg, trace, &heads.0, Task::Intent, d_intent, grads)?;
    let ds = classify_backward(params, cfg, trace, &heads.1, Task::Slots, d_slots, grads)?;
    d.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
    Ok(d)
}

/// Intent cross-entropy plus mean slot cross-entropy over the supervised
/// positions, with their logit gradients scaled by `scale`.
pub(crate) fn joint_ce(
    heads: &(HeadTrace, HeadTrace),
    ex: &EncodedExample,
    n_intents: usize,
    n_tags: usize,
    scale: f64,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let (li, _, mut gi) = cross_entropy_sum(&heads.0.logits, &[ex.intent as i64], n_intents)?;
    let (ls, count, mut gs) = cross_entropy_sum(&heads.1.logits, &ex.slot_labels, n_tags)?;
    let inv = 1.0 / count.max(1) as f64;
    gi.iter_mut().for_each(|g| *g *= scale);
    gs.iter_mut().for_each(|g| *g *= scale * inv);
    Ok((li, ls * inv, gi, gs))
}

/// Shuffled mini-batch epochs with a constant learning rate, shared by
/// fine-tuning and task distillation.
pub(crate) struct EpochLoop<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: &'a AdamConfig,
    pub seed: u64,
    pub exec: Execution,
    pub chunk: usize,
    pub patience: usize,
    pub trainable: Option<Vec<bool>>,
}

pub(crate) struct LoopResult {
    pub params: ParameterSet,
    /// Mean per-example loss of each epoch (first loss part).
    pub epoch_losses: Vec<f64>,
    pub val_history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl EpochLoop<'_> {
    /// `grad(params, step, k, example, scale, grads)` returns unscaled loss
    /// parts (total first) and accumulates `scale`-weighted gradients.
    /// `score` returns a lower-is-better validation value, if any.
    pub fn run<const N: usize, F, V>(&self, mut params: ParameterSet, n: usize, grad: F, mut score: V) -> Result<LoopResult>
    where
        F: Fn(&ParameterSet, u64, usize, usize, f64, &mut ParameterSet) -> Result<[f64; N]> + Sync + Send,
        V: FnMut(&ParameterSet) -> Result<Option<f64>>,
    {
        if n == 0 {
            return Err(Error::validation("training split is empty"));
        }
        let mut opt = AdamState::new(&params);
        let zeros = params.zeros_like();
        let mut step = 0u64;
        let mut epoch_losses = Vec::new();
        let mut val_history = Vec::new();
        let mut best: Option<(f64, usize, ParameterSet)> = None;
        let mut since_best = 0;
        for epoch in 0..self.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::derived(self.seed, &[stream::SHUFFLE, epoch as u64]));
            let mut total = 0.0;
            for batch in order.chunks(self.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let p = &params;
                let (parts, mut grads) = accumulate_gradients(self.exec, batch, self.chunk, &zeros, |k, &i, g| {
                    grad(p, step, k, i, scale, g)
                })?;
                if !parts[0].is_finite() {
                    return Err(Error::numeric(format!("non-finite loss at epoch {epoch}, step {step}"), None));
                }
                optimizer_step(&mut params, &mut grads, &mut opt, self.lr, self.adam, self.trainable.as_deref())?;
                total += parts[0];
                step += 1;
            }
            epoch_losses.push(total / n as f64);
            if let Some(s) = score(&params)? {
                val_history.push(s);
                if best.as_ref().is_none_or(|b| s < b.0) {
                    best = Some((s, epoch, params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if self.patience > 0 && since_best >= self.patience {
                        break;
                    }
                }
            }
        }
        let best_epoch = best.as_ref().map(|b| b.1);
        if let Some((_, _, p)) = best {
            params = p;
        }
        Ok(LoopResult { params, epoch_losses, val_history, best_epoch })
    }
}

/// Checkpoint selection key: validation exact-match error, with corpus
/// SemER breaking ties. Exact-match error moves in steps of `1 / val.len()`,
/// so the scaled SemER term never reorders distinct exact-match values.
pub(crate) fn selection_score(val: &[NluExample], preds: &[crate::evaluate::Prediction]) -> Result<f64> {
    let m = nlu_metrics(val, preds)?;
    Ok(m.exact_match_error + 1e-6 * m.semer.min(1e3))
}

/// One seed's fine-tuning result.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub bundle: NluModelBundle,
    pub val: NluMetrics,
    pub epoch_losses: Vec<f64>,
    /// Validation selection score after each epoch (see `selection_score`).
    pub val_history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn of(values: Vec<f64>) -> Self {
        MetricSummary { mean: crate::evaluate::mean(&values), std: stddev(&values), values }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub runs: Vec<SeedRun>,
    /// `semer`, `exact_match_error`, `ic_error` and `sf_error` over seeds.
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub fn summarize(metrics: &[NluMetrics]) -> BTreeMap<String, MetricSummary> {
    let pick = |f: fn(&NluMetrics) -> f64| MetricSummary::of(metrics.iter().map(f).collect());
    BTreeMap::from([
        ("semer".to_string(), pick(|m| m.semer)),
        ("exact_match_error".to_string(), pick(|m| m.exact_match_error)),
        ("ic_error".to_string(), pick(|m| m.ic_error)),
        ("sf_error".to_string(), pick(|m| m.sf_error)),
    ])
}

fn eval_traces(params: &ParameterSet, cfg: &EncoderConfig, data: &[EncodedExample], exec: Execution) -> Result<Vec<ForwardTrace>> {
    let opts = ForwardOptions::eval().logits(LogitPositions::None);
    par::map(exec, data, |_, e| forward(params, cfg, &e.utt.ids, None, &opts)).into_iter().collect()
}

pub(crate) fn predict_from_traces(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    tables: &LabelTables,
    data: &[EncodedExample],
    traces: &[ForwardTrace],
) -> Result<Vec<crate::evaluate::Prediction>> {
    data.iter()
        .zip(traces)
        .map(|(e, tr)| super::bundle::decode(params, cfg, tables, tr, &e.utt.word_starts))
        .collect()
}

/// Fine-tunes `ckpt` on `train` with one seed, selecting the epoch with the
/// lowest validation exact-match error.
pub fn finetune_seed(
    ckpt: &EncoderCheckpoint,
    tok: &TokenizerModel,
    train: &[NluExample],
    val: &[NluExample],
    fc: &FinetuneConfig,
    seed: u64,
) -> Result<SeedRun> {
    fc.validate()?;
    ckpt.require_fingerprint(&tok.fingerprint())?;
    if val.is_empty() {
        return Err(Error::validation("validation split is empty"));
    }
    let tables = LabelTables::from_examples(train)?;
    tables.check_covers(val)?;
    let source_checksum = encoder_checksum(&ckpt.params, &ckpt.config);
    let mut base = ckpt.config.clone();
    base.heads = None;
    let mut body = ckpt.params.clone();
    body.split_off(Layout::new(&base).encoder_len);
    let (params, mut cfg) = attach_heads(&body, &base, tables.head_config(fc.head_width, fc.pooling), seed)?;
    cfg.dropout = fc.dropout;
    let train_enc = encode_examples(tok, &tables, train, cfg.max_len)?;
    let val_enc = encode_examples(tok, &tables, val, cfg.max_len)?;
    let (ni, nt) = (tables.intents.len(), tables.tags.len());
    let frozen = fc.mode == FinetuneMode::Frozen;
    let enc_len = Layout::new(&cfg).encoder_len;

    // Frozen encoders see every input once; the heads train on cached states.
    let cached = if frozen { Some(eval_traces(&params, &cfg, &train_enc, fc.execution)?) } else { None };
    let val_cached = if frozen { Some(eval_traces(&params, &cfg, &val_enc, fc.execution)?) } else { None };

    let lp = EpochLoop {
        epochs: fc.epochs,
        batch_size: fc.batch_size,
        lr: fc.lr(),
        adam: &fc.adam,
        seed,
        exec: fc.execution,
        chunk: fc.grad_chunk,
        patience: fc.patience,
        trainable: frozen.then(|| (0..params.len()).map(|i| i >= enc_len).collect()),
    };
    let grad = |p: &ParameterSet, step: u64, k: usize, i: usize, scale: f64, g: &mut ParameterSet| -> Result<[f64; 3]> {
        let ex = &train_enc[i];
        let owned;
        let trace = match &cached {
            Some(c) => &c[i],
            None => {
                let opts = ForwardOptions::train(rng::derive(seed, &[stream::DROPOUT, step, k as u64])).logits(LogitPositions::None);
                owned = forward(p, &cfg, &ex.utt.ids, None, &opts)?;
                &owned
            }
        };
        let heads = head_traces(p, &cfg, trace)?;
        let (li, ls, gi, gs) = joint_ce(&heads, ex, ni, nt, scale)?;
        let d_final = heads_backward(p, &cfg, trace, &heads, &gi, &gs, g)?;
        if !frozen {
            backward_into(p, &cfg, trace, &Upstream { d_final: Some(&d_final), ..Default::default() }, g)?;
        }
        Ok([li + ls, li, ls])
    };
    let score = |p: &ParameterSet| -> Result<Option<f64>> {
        let traces = match &val_cached {
            Some(c) => c.clone(),
            None => eval_traces(p, &cfg, &val_enc, fc.execution)?,
        };
        let preds = predict_from_traces(p, &cfg, &tables, &val_enc, &traces)?;
        Ok(Some(selection_score(val, &preds)?))
    };
    let out = lp.run(params, train_enc.len(), grad, score)?;

    if frozen && encoder_checksum(&out.params, &cfg) != source_checksum {
        return Err(Error::numeric("frozen fine-tuning changed encoder weights", None));
    }
    let val_traces = match &val_cached {
        Some(c) => c.clone(),
        None => eval_traces(&out.params, &cfg, &val_enc, fc.execution)?,
    };
    let preds = predict_from_traces(&out.params, &cfg, &tables, &val_enc, &val_traces)?;
    let val_metrics = nlu_metrics(val, &preds)?;
    let mut model_cfg = cfg;
    model_cfg.dropout = ckpt.config.dropout;
    let bundle = NluModelBundle {
        model: EncoderCheckpoint { config: model_cfg, params: out.params, tokenizer_fingerprint: ckpt.tokenizer_fingerprint.clone() },
        tables,
        source_checksum,
    };
    Ok(SeedRun {
        seed,
        bundle,
        val: val_metrics,
        epoch_losses: out.epoch_losses,
        val_history: out.val_history,
        best_epoch: out.best_epoch,
    })
}

/// Runs [`finetune_seed`] for every configured seed and summarizes the
/// validation metrics as mean and standard deviation.
pub fn finetune(
    ckpt: &EncoderCheckpoint,
    tok: &TokenizerModel,
    train: &[NluExample],
    val: &[NluExample],
    fc: &FinetuneConfig,
) -> Result<FinetuneSummary> {
    fc.validate()?;
    let runs: Vec<SeedRun> = par::map(fc.execution, &fc.seeds, |_, &s| finetune_seed(ckpt, tok, train, val, fc, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let metrics = summarize(&runs.iter().map(|r| r.val.clone()).collect::<Vec<_>>());
    Ok(FinetuneSummary { runs, metrics })
}
