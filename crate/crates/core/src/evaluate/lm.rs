use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::TextExample;
use crate::encoder::{forward, mlm_loss_sum, EncoderConfig, ForwardOptions, LogitPositions};
use crate::error::{Error, Result};
use crate::par::{map, Execution};
use crate::pretrain::{apply_masking, MaskingPolicy};
use crate::rng::{self, stream};
use crate::tensor::{argmax, ParameterSet};
use crate::tokenizer::{TokenizerModel, BOS, EOS, MASK};

/// Summed masked-LM cross-entropy and label count over `seqs`, with the
/// masks derived from `(mask_seed, sequence index)`.
pub fn masked_lm_totals(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    seqs: &[Vec<u32>],
    policy: &MaskingPolicy,
    mask_seed: u64,
    exec: Execution,
) -> Result<(f64, usize)> {
    if seqs.is_empty() {
        return Err(Error::validation("perplexity needs a nonempty corpus"));
    }
    let parts = map(exec, seqs, |i, s| -> Result<(f64, usize)> {
        let m = apply_masking(s, policy, cfg.vocab_size, rng::derive(mask_seed, &[stream::MASK, i as u64]))?;
        let pos = m.positions();
        if pos.is_empty() {
            return Ok((0.0, 0));
        }
        let tr = forward(params, cfg, &m.input, None, &ForwardOptions::eval().logits(LogitPositions::Only(pos)))?;
        let (sum, n, _) = mlm_loss_sum(&tr, &m.labels, cfg.vocab_size)?;
        Ok((sum, n))
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, n) = p?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::validation("masking selected no position in the evaluation corpus"));
    }
    Ok((total, count))
}

/// `exp` of the mean masked-LM cross-entropy under a fixed-seed application
/// of the training masking policy.
pub fn perplexity(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    seqs: &[Vec<u32>],
    policy: &MaskingPolicy,
    mask_seed: u64,
    exec: Execution,
) -> Result<f64> {
    let (total, count) = masked_lm_totals(params, cfg, seqs, policy, mask_seed, exec)?;
    Ok((total / count as f64).exp())
}

/// Mean masked-LM loss (natural log of [`perplexity`]).
pub fn masked_lm_loss(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    seqs: &[Vec<u32>],
    policy: &MaskingPolicy,
    mask_seed: u64,
    exec: Execution,
) -> Result<f64> {
    let (total, count) = masked_lm_totals(params, cfg, seqs, policy, mask_seed, exec)?;
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFillTask {
    pub text: String,
    pub language: String,
    pub target: String,
    /// Original ids, `<s> … </s>`.
    pub context: Vec<u32>,
    /// Token positions `[start, end)` covering every piece of the target.
    pub span: (usize, usize),
}

impl MaskFillTask {
    pub fn masked_input(&self) -> Vec<u32> {
        let mut ids = self.context.clone();
        ids[self.span.0..self.span.1].fill(MASK);
        ids
    }
}

/// One task per sentence that contains a lexicon noun: a seeded choice among
/// its noun occurrences, with all of that word's pieces masked. Returns the
/// tasks and the number of skipped sentences.
pub fn build_mask_fill_tasks(
    corpus: &[TextExample],
    lexicon: &BTreeMap<String, BTreeSet<String>>,
    tok: &TokenizerModel,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<MaskFillTask>, usize)> {
    let mut tasks = Vec::new();
    let mut skipped = 0;
    for (si, ex) in corpus.iter().enumerate() {
        let nouns = lexicon
            .get(&ex.language)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::validation(format!("no noun lexicon for language {}", ex.language)))?;
        let words: Vec<&str> = ex.text.split_whitespace().collect();
        let mut context = vec![BOS];
        let mut spans = Vec::with_capacity(words.len());
        for w in &words {
            let ids = tok.encode_word(w);
            spans.push((context.len(), context.len() + ids.len()));
            context.extend(ids);
        }
        context.push(EOS);
        let eligible: Vec<usize> = (0..words.len()).filter(|&i| nouns.contains(words[i])).collect();
        if eligible.is_empty() || context.len() > max_len {
            skipped += 1;
            continue;
        }
        let mut r = rng::derived(seed, &[stream::TASKS, si as u64]);
        let pick = eligible[r.random_range(0..eligible.len())];
        tasks.push(MaskFillTask {
            text: ex.text.clone(),
            language: ex.language.clone(),
            target: words[pick].to_string(),
            context,
            span: spans[pick],
        });
    }
    if tasks.is_empty() {
        return Err(Error::validation("no sentence contains a lexicon noun"));
    }
    Ok((tasks, skipped))
}

/// Fails if any task sentence also occurs in the training texts.
pub fn ensure_held_out<S: AsRef<str>>(tasks: &[MaskFillTask], training: &[S]) -> Result<()> {
    let seen: HashSet<&str> = training.iter().map(|s| s.as_ref()).collect();
    if let Some(t) = tasks.iter().find(|t| seen.contains(t.text.as_str())) {
        return Err(Error::validation(format!("mask-fill sentence also appears in training data: {}", t.text)));
    }
    Ok(())
}

/// Whether the argmax at every masked position reproduces the original ids
/// (all positions masked at once, one forward pass).
pub fn mask_fill_hits(params: &ParameterSet, cfg: &EncoderConfig, tasks: &[MaskFillTask], exec: Execution) -> Result<Vec<bool>> {
    let v = cfg.vocab_size;
    map(exec, tasks, |_, t| -> Result<bool> {
        let pos: Vec<usize> = (t.span.0..t.span.1).collect();
        let tr = forward(params, cfg, &t.masked_input(), None, &ForwardOptions::eval().logits(LogitPositions::Only(pos.clone())))?;
        Ok(pos.iter().enumerate().all(|(r, &p)| argmax(tr.logits_row(r, v)) as u32 == t.context[p]))
    })
    .into_iter()
    .collect()
}

pub fn mask_fill_accuracy(params: &ParameterSet, cfg: &EncoderConfig, tasks: &[MaskFillTask], exec: Execution) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::validation("mask-fill accuracy needs at least one task"));
    }
    let hits = mask_fill_hits(params, cfg, tasks, exec)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Scores a task from explicit per-position predictions (used for oracle checks).
pub fn score_predictions(task: &MaskFillTask, predicted: &[u32]) -> bool {
    predicted.len() == task.span.1 - task.span.0
        && predicted.iter().zip(&task.context[task.span.0..task.span.1]).all(|(p, o)| p == o)
}
