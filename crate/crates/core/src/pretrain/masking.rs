use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::IGNORE;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{TokenizerModel, MASK, NUM_SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub keep_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy { select_prob: 0.15, mask_prob: 0.8, keep_prob: 0.1, random_prob: 0.1 }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.select_prob > 0.0 && self.select_prob <= 1.0) {
            return Err(Error::config(format!("select_prob {} outside (0, 1]", self.select_prob)));
        }
        let parts = [self.mask_prob, self.keep_prob, self.random_prob];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("mask, keep and random shares must be probabilities summing to 1"));
        }
        Ok(())
    }
}

/// Outcome of masking one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub input: Vec<u32>,
    /// Original id at selected positions, `IGNORE` elsewhere.
    pub labels: Vec<i64>,
}

impl Masked {
    pub fn positions(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &y)| y != IGNORE).map(|(i, _)| i).collect()
    }
}

fn maskable(id: u32) -> bool {
    !TokenizerModel::is_special(id)
}

/// Independently selects each non-special position with `select_prob`, then
/// replaces it with `<mask>`, leaves it, or swaps in a uniform random
/// non-special id.
pub fn apply_masking(ids: &[u32], policy: &MaskingPolicy, vocab_size: usize, seed: u64) -> Result<Masked> {
    policy.validate()?;
    if !ids.iter().any(|&id| maskable(id)) {
        return Err(Error::validation("sequence has no maskable (non-special) token"));
    }
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(Error::config("vocabulary has no non-special tokens"));
    }
    let mut rng = rng::seeded(seed);
    let mut input = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if !maskable(id) {
            continue;
        }
        if rng.random::<f64>() >= policy.select_prob {
            continue;
        }
        labels[i] = id as i64;
        let u = rng.random::<f64>();
        if u < policy.mask_prob {
            input[i] = MASK;
        } else if u >= policy.mask_prob + policy.keep_prob {
            input[i] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
        }
    }
    Ok(Masked { input, labels })
}

/// Training variant: if no position was selected, one maskable position
/// chosen from the same seed is selected and replaced by `<mask>`, so every
/// sequence contributes to the loss.
pub fn mask_for_training(ids: &[u32], policy: &MaskingPolicy, vocab_size: usize, seed: u64) -> Result<Masked> {
    let mut m = apply_masking(ids, policy, vocab_size, seed)?;
    if m.labels.iter().all(|&y| y == IGNORE) {
        let cands: Vec<usize> = (0..ids.len()).filter(|&i| maskable(ids[i])).collect();
        let mut rng = rng::derived(seed, &[1]);
        let i = cands[rng.random_range(0..cands.len())];
        m.labels[i] = ids[i] as i64;
        m.input[i] = MASK;
    }
    Ok(m)
}
