//! Unigram-LM vocabulary training.
//!
//! Seed vocabulary: every character of the corpus plus all substrings of up
//! to [`MAX_SEED_CHARS`] characters seen at least twice, ranked by count.
//! The vocabulary is then alternately re-estimated with EM (expected piece
//! counts from forward-backward over each word's segmentation lattice) and
//! pruned: each round drops the 20% of pieces whose removal costs the least
//! corpus likelihood, until the target size is reached. Single characters and
//! forced pieces are never pruned.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;

use super::model::{TokenizerModel, NUM_SPECIALS, WORD_MARKER};
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_SEED_CHARS: usize = 8;
pub const EM_ROUNDS: usize = 4;
pub const PRUNE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Upper bound on the number of corpus lines used; larger corpora are
    /// subsampled with a seeded shuffle.
    pub max_sentences: usize,
    /// Seed-vocabulary size as a multiple of the target vocabulary size.
    pub seed_multiplier: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_sentences: 200_000,
            seed_multiplier: 8,
        }
    }
}

struct Trainer {
    /// Marked words (as chars) with their corpus frequency, sorted by word.
    words: Vec<(Vec<char>, f64)>,
    pieces: Vec<(String, f64)>,
    protected: BTreeSet<String>,
    forced: BTreeSet<String>,
}

fn logsumexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Trainer {
    fn model(&self) -> TokenizerModel {
        TokenizerModel::new(self.pieces.clone(), self.forced.clone()).expect("trainer keeps a valid vocabulary")
    }

    fn em_step(&mut self) {
        let index: HashMap<&str, usize> = self.pieces.iter().enumerate().map(|(i, (p, _))| (p.as_str(), i)).collect();
        let max_len = self.pieces.iter().map(|(p, _)| p.chars().count()).max().unwrap_or(1);
        let mut expected = vec![0.0f64; self.pieces.len()];
        for (chars, freq) in &self.words {
            let n = chars.len();
            // arcs[i] = (end, piece index)
            let mut arcs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
            for (i, slot) in arcs.iter_mut().enumerate() {
                let mut key = String::new();
                for end in i + 1..=(i + max_len).min(n) {
                    key.push(chars[end - 1]);
                    if let Some(&k) = index.get(key.as_str()) {
                        slot.push((end, k));
                    }
                }
            }
            let mut alpha = vec![f64::NEG_INFINITY; n + 1];
            alpha[0] = 0.0;
            for i in 0..n {
                if alpha[i] == f64::NEG_INFINITY {
                    continue;
                }
                for &(end, k) in &arcs[i] {
                    alpha[end] = logsumexp(alpha[end], alpha[i] + self.pieces[k].1);
                }
            }
            let mut beta = vec![f64::NEG_INFINITY; n + 1];
            beta[n] = 0.0;
            for i in (0..n).rev() {
                for &(end, k) in &arcs[i] {
                    beta[i] = logsumexp(beta[i], self.pieces[k].1 + beta[end]);
                }
            }
            let z = alpha[n];
            if z == f64::NEG_INFINITY {
                continue;
            }
            for i in 0..n {
                for &(end, k) in &arcs[i] {
                    let post = (alpha[i] + self.pieces[k].1 + beta[end] - z).exp();
                    expected[k] += freq * post;
                }
            }
        }
        self.reestimate(&expected);
    }

    /// Maximum-likelihood log-probabilities from counts. Unused pieces are
    /// floored at the smallest retained log-probability.
    fn reestimate(&mut self, counts: &[f64]) {
        let total: f64 = counts.iter().sum();
        // Tiny expected counts can underflow to ln(0); those share the floor.
        let lps: Vec<f64> = counts.iter().map(|c| (c / total).ln()).collect();
        let floor = lps.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::min);
        for ((_, lp), v) in self.pieces.iter_mut().zip(lps) {
            *lp = if v.is_finite() { v } else { floor };
        }
    }

    /// Removes up to `max_remove` (at least one) of the least useful
    /// removable pieces, bounded by 20% of the current size.
    fn prune(&mut self, max_remove: usize) {
        let model = self.model();
        let mut viterbi_freq = vec![0.0f64; self.pieces.len()];
        for (chars, freq) in &self.words {
            for (_, _, id) in model.segment_chars(chars) {
                if id >= NUM_SPECIALS {
                    viterbi_freq[(id - NUM_SPECIALS) as usize] += freq;
                }
            }
        }
        let mut losses: Vec<(f64, usize)> = Vec::new();
        for (k, (p, lp)) in self.pieces.iter().enumerate() {
            if self.protected.contains(p) {
                continue;
            }
            let alt: f64 = model
                .alternative_segmentation(p)
                .into_iter()
                .map(|id| model.log_prob(id).unwrap_or(f64::NEG_INFINITY))
                .sum();
            let loss = viterbi_freq[k] * (lp - alt);
            losses.push((loss, k));
        }
        losses.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| self.pieces[b.1].0.cmp(&self.pieces[a.1].0))
        });
        let quota = ((self.pieces.len() as f64 * PRUNE_FRACTION).ceil() as usize).max(1);
        let n_remove = quota.min(max_remove).min(losses.len());
        let drop: BTreeSet<usize> = losses[..n_remove].iter().map(|(_, k)| *k).collect();
        let mut k = 0;
        self.pieces.retain(|_| {
            let keep = !drop.contains(&k);
            k += 1;
            keep
        });
    }
}

fn word_frequencies(corpus: &[String], seed: u64, opts: &TrainOptions) -> BTreeMap<String, u64> {
    let mut lines: Vec<&String> = corpus.iter().collect();
    if lines.len() > opts.max_sentences {
        lines.shuffle(&mut rng::derived(seed, &[rng::stream::SHUFFLE, 0x70]));
        lines.truncate(opts.max_sentences);
    }
    let mut freq = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            let mut marked = String::with_capacity(w.len() + 3);
            marked.push(WORD_MARKER);
            marked.push_str(w);
            *freq.entry(marked).or_insert(0) += 1;
        }
    }
    freq
}

/// Trains one vocabulary per requested size along a single pruning
/// trajectory, so each smaller vocabulary is a subset of every larger one.
/// Models are returned in the order of `sizes`.
pub fn train_unigram_nested(
    corpus: &[String],
    sizes: &[usize],
    forced: &BTreeSet<String>,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<TokenizerModel>> {
    if sizes.is_empty() {
        return Err(Error::validation("no vocabulary sizes requested"));
    }
    for f in forced {
        if f.is_empty() || f.chars().any(char::is_whitespace) {
            return Err(Error::config(format!("forced piece {f:?} is empty or contains whitespace")));
        }
    }
    let freq = word_frequencies(corpus, seed, opts);
    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    let mut sub_counts: HashMap<String, u64> = HashMap::new();
    for (w, &f) in &freq {
        let chars: Vec<char> = w.chars().collect();
        for &c in &chars {
            *char_counts.entry(c).or_insert(0) += f;
        }
        for i in 0..chars.len() {
            let mut s = String::new();
            s.push(chars[i]);
            for &c in chars.iter().skip(i + 1).take(MAX_SEED_CHARS - 1) {
                s.push(c);
                *sub_counts.entry(s.clone()).or_insert(0) += f;
            }
        }
    }
    let singles: BTreeSet<String> = char_counts.keys().map(|c| c.to_string()).collect();
    let protected: BTreeSet<String> = singles.union(forced).cloned().collect();
    let min_size = sizes.iter().copied().min().expect("nonempty");
    let max_size = sizes.iter().copied().max().expect("nonempty");
    if min_size <= NUM_SPECIALS as usize + protected.len() {
        return Err(Error::config(format!(
            "vocab size {min_size} cannot hold {} specials plus {} required pieces",
            NUM_SPECIALS,
            protected.len()
        )));
    }

    let mut candidates: Vec<(String, u64)> = sub_counts
        .into_iter()
        .filter(|(s, c)| *c >= 2 && !protected.contains(s))
        .collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(max_size.saturating_mul(opts.seed_multiplier));

    let mut counts: Vec<f64> = Vec::new();
    let mut pieces: Vec<(String, f64)> = Vec::new();
    for s in &protected {
        let c = s.chars().next().and_then(|ch| char_counts.get(&ch)).copied().unwrap_or(0);
        let c = if s.chars().count() == 1 { c } else { 0 };
        pieces.push((s.clone(), 0.0));
        counts.push(c as f64);
    }
    for (s, c) in candidates {
        pieces.push((s, 0.0));
        counts.push(c as f64);
    }
    let mut trainer = Trainer {
        words: freq.into_iter().map(|(w, f)| (w.chars().collect(), f as f64)).collect(),
        pieces,
        protected,
        forced: forced.clone(),
    };
    trainer.reestimate(&counts);

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]));
    let mut models: Vec<Option<TokenizerModel>> = vec![None; sizes.len()];
    for idx in order {
        let target = sizes[idx] - NUM_SPECIALS as usize;
        loop {
            for _ in 0..EM_ROUNDS {
                trainer.em_step();
            }
            if trainer.pieces.len() <= target {
                break;
            }
            let excess = trainer.pieces.len() - target;
            trainer.prune(excess);
        }
        models[idx] = Some(trainer.model());
    }
    Ok(models.into_iter().map(|m| m.expect("every size trained")).collect())
}

/// Trains a unigram vocabulary of `vocab_size` ids (specials included).
/// When the corpus offers fewer candidate pieces, the vocabulary is smaller.
pub fn train_unigram(
    corpus: &[String],
    vocab_size: usize,
    forced: &BTreeSet<String>,
    seed: u64,
) -> Result<TokenizerModel> {
    let mut models = train_unigram_nested(corpus, &[vocab_size], forced, seed, &TrainOptions::default())?;
    Ok(models.pop().expect("one model"))
}
