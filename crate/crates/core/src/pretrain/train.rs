use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::masking::{mask_for_training, MaskingPolicy};
use super::optim::{optimizer_step, AdamConfig, AdamState, Schedule};
use crate::encoder::{
    backward_into, forward, mlm_loss_sum, read_tensors, save_dir, write_tensors, EncoderCheckpoint, EncoderConfig,
    ForwardOptions, LogitPositions, Upstream,
};
use crate::error::{Error, Result};
use crate::evaluate::perplexity;
use crate::io::{append_line, read_json, read_string, write_atomic, write_json};
use crate::par::{chunked_fold, Execution};
use crate::rng::{self, stream};
use crate::tensor::ParameterSet;
use crate::tokenizer::{TokenizerModel, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

fn default_chunk() -> usize {
    4
}

fn default_eval_seed() -> u64 {
    1234
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub dropout: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 checkpoints only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub masking: MaskingPolicy,
    #[serde(default = "default_eval_seed")]
    pub eval_mask_seed: u64,
    #[serde(default)]
    pub execution: Execution,
    /// Sequences per gradient accumulation chunk (fixes the summation order).
    #[serde(default = "default_chunk")]
    pub grad_chunk: usize,
}

impl TrainConfig {
    pub fn toy(max_steps: u64, seed: u64) -> Self {
        TrainConfig {
            schedule: Schedule {
                peak_lr: 3e-3,
                min_lr: 1e-4,
                warmup_steps: (max_steps / 20).max(1),
                decay_steps: max_steps,
                warmup_shape: super::optim::WarmupShape::Exponential,
            },
            adam: AdamConfig { weight_decay: 0.01, ..Default::default() },
            batch_tokens: 256,
            max_steps,
            dropout: 0.0,
            seed,
            eval_every: 0,
            checkpoint_every: 0,
            masking: MaskingPolicy::default(),
            eval_mask_seed: default_eval_seed(),
            execution: Execution::default(),
            grad_chunk: default_chunk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.adam.validate()?;
        self.masking.validate()?;
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout outside [0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// `<s> pieces </s>`, truncated to `max_len`. Texts with no pieces are dropped.
pub fn encode_sequences<S: AsRef<str>>(tok: &TokenizerModel, texts: &[S], max_len: usize) -> Vec<Vec<u32>> {
    let keep = max_len.saturating_sub(2).max(1);
    texts
        .iter()
        .filter_map(|t| {
            let mut ids = tok.encode(t.as_ref());
            if ids.is_empty() {
                return None;
            }
            ids.truncate(keep);
            let mut s = Vec::with_capacity(ids.len() + 2);
            s.push(BOS);
            s.extend(ids);
            s.push(EOS);
            Some(s)
        })
        .collect()
}

/// Deterministic stream of batches: seeded per-epoch permutations cut into
/// consecutive groups whose token total stays within the budget (at least
/// one sequence per batch).
#[derive(Debug, Clone)]
pub struct BatchPlan {
    lens: Vec<usize>,
    budget: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchPlan {
    pub fn new(lens: Vec<usize>, budget: usize, seed: u64) -> Result<Self> {
        if lens.is_empty() {
            return Err(Error::validation("training corpus is empty"));
        }
        let mut p = BatchPlan { lens, budget, seed, epoch: 0, perm: Vec::new(), pos: 0 };
        p.shuffle();
        Ok(p)
    }

    fn shuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.perm = (0..self.lens.len()).collect();
        self.perm.shuffle(&mut rng::derived(self.seed, &[stream::ORDER, self.epoch]));
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut tokens = 0;
        loop {
            if self.pos == self.perm.len() {
                self.epoch += 1;
                self.shuffle();
            }
            let i = self.perm[self.pos];
            if !out.is_empty() && tokens + self.lens[i] > self.budget {
                return out;
            }
            tokens += self.lens[i];
            out.push(i);
            self.pos += 1;
            if tokens >= self.budget {
                return out;
            }
        }
    }

    pub fn skip(&mut self, n: u64) {
        for _ in 0..n {
            self.next_batch();
        }
    }
}

/// Mean masked-LM loss of one batch and its gradient. Masks and dropout are
/// derived from `(seed, step, position in batch)`.
pub fn mlm_batch_gradient(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    batch: &[&[u32]],
    policy: &MaskingPolicy,
    seed: u64,
    step: u64,
    exec: Execution,
    chunk: usize,
) -> Result<(f64, ParameterSet)> {
    let masked: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(k, s)| mask_for_training(s, policy, cfg.vocab_size, rng::derive(seed, &[stream::MASK, step, k as u64])))
        .collect::<Result<_>>()?;
    let total: usize = masked.iter().map(|m| m.positions().len()).sum();
    let inv = 1.0 / total as f64;
    let acc = chunked_fold(
        exec,
        &masked,
        chunk,
        || Ok((params.zeros_like(), 0.0)),
        |acc: &mut Result<(ParameterSet, f64)>, k, m| {
            let Ok((grads, loss)) = acc else { return };
            let opts = ForwardOptions::train(rng::derive(seed, &[stream::DROPOUT, step, k as u64]))
                .logits(LogitPositions::Only(m.positions()));
            let r = forward(params, cfg, &m.input, None, &opts).and_then(|tr| {
                let (sum, _, mut d) = mlm_loss_sum(&tr, &m.labels, cfg.vocab_size)?;
                d.iter_mut().for_each(|g| *g *= inv);
                backward_into(params, cfg, &tr, &Upstream { d_logits: Some(&d), ..Default::default() }, grads)?;
                Ok(sum)
            });
            match r {
                Ok(sum) => *loss += sum,
                Err(e) => *acc = Err(e),
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok((ga, la)), Ok((gb, lb))) => {
                ga.add_assign(&gb);
                *la += lb;
            }
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    )
    .expect("nonempty batch")?;
    let (grads, loss) = acc;
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub stage: Stage,
    pub train_loss_ema: Option<f64>,
    /// Loss sum and step count since the last metrics record.
    pub interval_loss: (f64, u64),
    pub train_config: TrainConfig,
    /// Every random stream is derived from this seed and the step counter.
    pub rng_seed: u64,
}

pub const META: &str = "meta.json";
pub const OPT_MANIFEST: &str = "optimizer.manifest";
pub const OPT_BLOB: &str = "optimizer.bin";
pub const METRICS: &str = "metrics.jsonl";
pub const LATEST: &str = "latest";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:07}")
}

/// A resumable training checkpoint: encoder, optimizer moments and meta.
#[derive(Debug, Clone)]
pub struct TrainCheckpoint {
    pub encoder: EncoderCheckpoint,
    pub optimizer: AdamState,
    pub meta: CheckpointMeta,
}

impl TrainCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dir(dir, |tmp| {
            self.encoder.write_into(tmp)?;
            write_tensors(tmp, OPT_MANIFEST, OPT_BLOB, &self.optimizer.to_params())?;
            write_json(&tmp.join(META), &self.meta)
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = EncoderCheckpoint::load(dir)?;
        let meta: CheckpointMeta = read_json(&dir.join(META))?;
        let optimizer = AdamState::from_params(read_tensors(dir, OPT_MANIFEST, OPT_BLOB)?, meta.step)?;
        Ok(TrainCheckpoint { encoder, optimizer, meta })
    }
}

/// Reads `out_dir/latest` and returns the checkpoint directory it names.
pub fn latest_checkpoint(out_dir: &Path) -> Result<PathBuf> {
    Ok(out_dir.join(read_string(&out_dir.join(LATEST))?.trim()))
}

pub struct TrainSpec<'a> {
    pub encoder: &'a EncoderConfig,
    pub train: &'a TrainConfig,
    pub stage: Stage,
    pub fingerprint: &'a str,
    /// Where checkpoints and the metrics log go; `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
}

pub enum Start {
    /// Fresh optimizer state from the given weights.
    Params(ParameterSet),
    /// Continue a checkpoint written by an earlier (interrupted) run.
    Resume(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub optimizer: AdamState,
    pub step: u64,
    pub log: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_trace: Vec<f64>,
}

pub type EvalHook<'h> = &'h mut dyn FnMut(&MetricRecord, &ParameterSet) -> Result<()>;

/// Masked-LM training loop shared by Stage 1, Stage 2 and the teacherless
/// interlude.
pub fn train_mlm(
    spec: &TrainSpec<'_>,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    start: Start,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainOutcome> {
    let tc = spec.train;
    tc.validate()?;
    let mut cfg = spec.encoder.clone();
    cfg.dropout = tc.dropout;
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::validation("validation corpus is empty"));
    }
    let (mut params, mut opt, first, mut ema, mut interval) = match start {
        Start::Params(p) => {
            crate::encoder::check_shapes(&p, &cfg)?;
            let s = AdamState::new(&p);
            (p, s, 0, None, (0.0, 0))
        }
        Start::Resume(dir) => {
            let ck = TrainCheckpoint::load(&dir)?;
            ck.encoder.require_fingerprint(spec.fingerprint)?;
            if ck.meta.stage != spec.stage {
                return Err(Error::config("resumed checkpoint belongs to a different stage"));
            }
            let same = TrainConfig { max_steps: tc.max_steps, ..ck.meta.train_config.clone() };
            if same != *tc {
                return Err(Error::config("resumed checkpoint was produced with a different training config (only max_steps may change)"));
            }
            (ck.encoder.params, ck.optimizer, ck.meta.step, ck.meta.train_loss_ema, ck.meta.interval_loss)
        }
    };
    if train.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    let mut plan = BatchPlan::new(train.iter().map(Vec::len).collect(), tc.batch_tokens, tc.seed)?;
    plan.skip(first);

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut loss_trace = Vec::new();
    if let Some(dir) = spec.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS);
        // Drop records written after the checkpoint we resume from.
        // Raw lines are kept verbatim so re-serialization cannot perturb them.
        let mut kept = String::new();
        if path.exists() && first > 0 {
            for line in read_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
                let rec: MetricRecord =
                    serde_json::from_str(line).map_err(|e| Error::format(&path, e.to_string()))?;
                if rec.step <= first {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        write_atomic(&path, kept.as_bytes())?;
    }

    let eval = |p: &ParameterSet| perplexity(p, &cfg, val, &tc.masking, tc.eval_mask_seed, tc.execution);
    let mut record = |rec: MetricRecord, p: &ParameterSet, log: &mut Vec<MetricRecord>| -> Result<()> {
        if let Some(dir) = spec.out_dir {
            append_line(&dir.join(METRICS), &serde_json::to_string(&rec).expect("serializable"))?;
        }
        if let Some(h) = hook.as_mut() {
            h(&rec, p)?;
        }
        log.push(rec);
        Ok(())
    };
    let save = |step: u64, p: &ParameterSet, o: &AdamState, ema: Option<f64>, interval: (f64, u64)| -> Result<Option<PathBuf>> {
        let Some(dir) = spec.out_dir else { return Ok(None) };
        let ck = TrainCheckpoint {
            encoder: EncoderCheckpoint { config: spec.encoder.clone(), params: p.clone(), tokenizer_fingerprint: spec.fingerprint.to_string() },
            optimizer: o.clone(),
            meta: CheckpointMeta {
                step,
                stage: spec.stage,
                train_loss_ema: ema,
                interval_loss: interval,
                train_config: tc.clone(),
                rng_seed: tc.seed,
            },
        };
        let name = checkpoint_name(step);
        let path = dir.join(&name);
        ck.save(&path)?;
        write_atomic(&dir.join(LATEST), format!("{name}\n").as_bytes())?;
        Ok(Some(path))
    };

    if first == 0 {
        let rec = MetricRecord { step: 0, lr: tc.schedule.lr_at(0), train_loss: None, val_perplexity: eval(&params)? };
        record(rec, &params, &mut log)?;
        if tc.max_steps == 0 {
            checkpoints.extend(save(0, &params, &opt, ema, interval)?);
        }
    }

    for step in first..tc.max_steps {
        let idx = plan.next_batch();
        let batch: Vec<&[u32]> = idx.iter().map(|&i| train[i].as_slice()).collect();
        let lr = tc.schedule.lr_at(step);
        let (loss, mut grads) = mlm_batch_gradient(&params, &cfg, &batch, &tc.masking, tc.seed, step, tc.execution, tc.grad_chunk)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite training loss at step {step}"), None));
        }
        optimizer_step(&mut params, &mut grads, &mut opt, lr, &tc.adam, None)?;
        loss_trace.push(loss);
        ema = Some(ema.map_or(loss, |e| 0.98 * e + 0.02 * loss));
        interval = (interval.0 + loss, interval.1 + 1);
        let done = step + 1;
        let last = done == tc.max_steps;
        if last || (tc.eval_every > 0 && done % tc.eval_every == 0) {
            let rec = MetricRecord {
                step: done,
                lr,
                train_loss: Some(interval.0 / interval.1 as f64),
                val_perplexity: eval(&params)?,
            };
            interval = (0.0, 0);
            record(rec, &params, &mut log)?;
        }
        if last || (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
            checkpoints.extend(save(done, &params, &opt, ema, interval)?);
        }
    }
    let step = tc.max_steps.max(first);
    Ok(TrainOutcome { params, optimizer: opt, step, log, checkpoints, loss_trace })
}

/// Continues masked-LM training on the Stage-2 mixture with a fresh
/// optimizer state.
pub fn stage2_continue(
    stage1: &EncoderCheckpoint,
    train: &[Vec<u32>],
    val: &[Vec<u32>],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let spec = TrainSpec {
        encoder: &stage1.config,
        train: tc,
        stage: Stage::Stage2,
        fingerprint: &stage1.tokenizer_fingerprint,
        out_dir,
    };
    train_mlm(&spec, train, val, Start::Params(stage1.params.clone()), None)
}
