use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TextExample;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Exponentially smoothed language distribution: `q_i ∝ p_i^α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDistribution {
    pub alpha: f64,
    pub probs: BTreeMap<String, f64>,
}

impl LanguageDistribution {
    pub fn prob(&self, lang: &str) -> f64 {
        self.probs.get(lang).copied().unwrap_or(0.0)
    }
}

pub fn compute_language_distribution(
    counts: &BTreeMap<String, u64>,
    alpha: f64,
) -> Result<LanguageDistribution> {
    if counts.is_empty() {
        return Err(Error::config("language counts are empty"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if let Some((lang, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::validation(format!("language `{lang}` has a nonpositive count")));
    }
    let total: f64 = counts.values().map(|&n| n as f64).sum();
    let smoothed: Vec<(String, f64)> = counts
        .iter()
        .map(|(l, &n)| (l.clone(), (n as f64 / total).powf(alpha)))
        .collect();
    let z: f64 = smoothed.iter().map(|(_, w)| w).sum();
    Ok(LanguageDistribution {
        alpha,
        probs: smoothed.into_iter().map(|(l, w)| (l, w / z)).collect(),
    })
}

/// Draws records from one source cyclically over a seeded shuffle.
struct CyclicSource<'a> {
    records: &'a [TextExample],
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> CyclicSource<'a> {
    fn new(records: &'a [TextExample], seed: u64, key: u64) -> Self {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng::derived(seed, &[stream::SHUFFLE, key]));
        CyclicSource {
            records,
            order,
            cursor: 0,
        }
    }

    fn next(&mut self) -> TextExample {
        let rec = self.records[self.order[self.cursor]].clone();
        self.cursor = (self.cursor + 1) % self.order.len();
        rec
    }
}

/// Picks indices from a categorical distribution given by `weights`.
fn draw_categorical(weights: &[f64], size: usize, seed: u64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut rng = rng::derived(seed, &[stream::SAMPLE]);
    (0..size)
        .map(|_| {
            let u: f64 = rng.random();
            cdf.iter()
                .position(|&c| u < c)
                .unwrap_or(weights.len() - 1)
        })
        .collect()
}

/// Offline up-sampling: materializes `size` records, choosing each record's
/// language from `dist` and cycling through each language's shuffled stream.
pub fn sample_corpus(
    streams: &BTreeMap<String, Vec<TextExample>>,
    dist: &LanguageDistribution,
    size: usize,
    seed: u64,
) -> Result<Vec<TextExample>> {
    if size == 0 {
        return Err(Error::validation("sample size must be positive"));
    }
    let langs: Vec<&String> = dist.probs.keys().collect();
    let mut sources = Vec::with_capacity(langs.len());
    for (k, lang) in langs.iter().enumerate() {
        let records = streams
            .get(*lang)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::validation(format!("no stream for language `{lang}`")))?;
        sources.push(CyclicSource::new(records, seed, k as u64));
    }
    let weights: Vec<f64> = langs.iter().map(|l| dist.probs[*l]).collect();
    Ok(draw_categorical(&weights, size, seed)
        .into_iter()
        .map(|k| sources[k].next())
        .collect())
}

/// Draws `size` records, each from part `k` with probability proportional
/// to its weight.
pub fn mix_corpora(parts: &[(Vec<TextExample>, f64)], size: usize, seed: u64) -> Result<Vec<TextExample>> {
    if parts.is_empty() {
        return Err(Error::validation("mixture has no parts"));
    }
    for (k, (records, w)) in parts.iter().enumerate() {
        if records.is_empty() {
            return Err(Error::validation(format!("mixture part {k} is empty")));
        }
        if !(*w > 0.0 && w.is_finite()) {
            return Err(Error::validation(format!("mixture part {k} has weight {w}")));
        }
    }
    let mut sources: Vec<_> = parts
        .iter()
        .enumerate()
        .map(|(k, (r, _))| CyclicSource::new(r, seed, k as u64))
        .collect();
    let weights: Vec<f64> = parts.iter().map(|(_, w)| *w).collect();
    Ok(draw_categorical(&weights, size, seed)
        .into_iter()
        .map(|k| sources[k].next())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Form;
    use proptest::prelude::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(l, n)| (l.to_string(), *n)).collect()
    }

    fn stream(lang: &str, n: usize) -> Vec<TextExample> {
        (0..n)
            .map(|i| TextExample::new(format!("{lang} sentence {i}"), lang, Form::Written, "test"))
            .collect()
    }

    #[test]
    fn symmetric_counts_give_uniform() {
        let d = compute_language_distribution(&counts(&[("en", 50), ("fr", 50)]), 0.5).unwrap();
        assert_eq!(d.prob("en"), 0.5);
        assert_eq!(d.prob("fr"), 0.5);
    }

    #[test]
    fn alpha_one_is_empirical() {
        let d = compute_language_distribution(&counts(&[("en", 100), ("mr", 1)]), 1.0).unwrap();
        assert!((d.prob("en") - 100.0 / 101.0).abs() < 1e-12);
        assert!((d.prob("mr") - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn square_root_smoothing() {
        // Shared total: q ∝ √n, so √100 : √1 = 10 : 1.
        let d = compute_language_distribution(&counts(&[("en", 100), ("mr", 1)]), 0.5).unwrap();
        assert!((d.prob("en") - 10.0 / 11.0).abs() < 1e-12);
        assert!((d.prob("mr") - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn distribution_errors() {
        assert!(matches!(
            compute_language_distribution(&BTreeMap::new(), 0.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            compute_language_distribution(&counts(&[("en", 0)]), 0.5),
            Err(Error::Validation(_))
        ));
        assert!(compute_language_distribution(&counts(&[("en", 1)]), 0.0).is_err());
        assert!(compute_language_distribution(&counts(&[("en", 1)]), 1.5).is_err());
    }

    #[test]
    fn degenerate_distribution_samples_one_language() {
        let streams: BTreeMap<_, _> = [("en".to_string(), stream("en", 3))].into();
        let dist = compute_language_distribution(&counts(&[("en", 3)]), 0.5).unwrap();
        let out = sample_corpus(&streams, &dist, 10, 1).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|r| r.language == "en"));
        // cyclic: first 3 draws are a permutation of the stream
        let mut first: Vec<_> = out[..3].iter().map(|r| r.text.clone()).collect();
        first.sort();
        assert_eq!(first, vec!["en sentence 0", "en sentence 1", "en sentence 2"]);
        assert_eq!(out[0], out[3]);
    }

    #[test]
    fn marathi_frequency_matches_smoothed_share() {
        let streams: BTreeMap<_, _> = [
            ("en".to_string(), stream("en", 100)),
            ("mr".to_string(), stream("mr", 1)),
        ]
        .into();
        let dist = compute_language_distribution(&counts(&[("en", 100), ("mr", 1)]), 0.5).unwrap();
        let out = sample_corpus(&streams, &dist, 100_000, 7).unwrap();
        let frac = out.iter().filter(|r| r.language == "mr").count() as f64 / out.len() as f64;
        assert!((frac - 1.0 / 11.0).abs() < 0.005, "{frac}");
    }

    #[test]
    fn sample_errors() {
        let streams: BTreeMap<_, _> = [("en".to_string(), stream("en", 3))].into();
        let dist = compute_language_distribution(&counts(&[("en", 3), ("fr", 3)]), 0.5).unwrap();
        assert!(matches!(sample_corpus(&streams, &dist, 0, 1), Err(Error::Validation(_))));
        assert!(matches!(sample_corpus(&streams, &dist, 5, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn mixture_ratios() {
        let spoken: Vec<_> = stream("en", 50).into_iter().map(|mut r| { r.form = Form::Spoken; r }).collect();
        let written = stream("en", 50);
        let out = mix_corpora(&[(spoken, 0.7), (written, 0.3)], 100_000, 3).unwrap();
        let frac = out.iter().filter(|r| r.form == Form::Spoken).count() as f64 / 1e5;
        assert!((frac - 0.7).abs() < 0.01, "{frac}");

        let stage1: Vec<_> = stream("en", 20);
        let inhouse: Vec<_> = stream("en", 20).into_iter().map(|mut r| { r.source = "inhouse".into(); r }).collect();
        let out = mix_corpora(&[(stage1, 1.0), (inhouse, 2.0)], 90_000, 3).unwrap();
        let frac = out.iter().filter(|r| r.source == "inhouse").count() as f64 / 9e4;
        assert!((frac - 2.0 / 3.0).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mixture_errors() {
        assert!(mix_corpora(&[(vec![], 1.0)], 5, 1).is_err());
        assert!(mix_corpora(&[(stream("en", 2), 0.0)], 5, 1).is_err());
        assert!(mix_corpora(&[], 5, 1).is_err());
    }

    #[test]
    fn single_part_mixture_is_the_stream_cycled() {
        let s = stream("en", 4);
        let out = mix_corpora(&[(s.clone(), 5.0)], 8, 9).unwrap();
        let mut seen: Vec<_> = out[..4].to_vec();
        seen.sort_by(|a, b| a.text.cmp(&b.text));
        assert_eq!(seen, s);
        assert_eq!(out[..4], out[4..]);
    }

    proptest! {
        #[test]
        fn distribution_is_normalized_and_order_preserving(
            raw in proptest::collection::vec(1u64..1_000_000, 1..12),
            alpha in 0.01f64..=1.0,
        ) {
            let c: BTreeMap<String, u64> =
                raw.iter().enumerate().map(|(i, n)| (format!("l{i:02}"), *n)).collect();
            let d = compute_language_distribution(&c, alpha).unwrap();
            let sum: f64 = d.probs.values().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for (a, na) in &c {
                for (b, nb) in &c {
                    if na < nb {
                        prop_assert!(d.probs[a] <= d.probs[b]);
                    }
                }
            }
            // up-sampling: the smallest language gains mass when alpha < 1
            let total: u64 = c.values().sum();
            let (min_lang, min_n) = c.iter().min_by_key(|(_, n)| **n).unwrap();
            let p_min = *min_n as f64 / total as f64;
            let distinct = c.values().any(|n| n != min_n);
            if alpha < 0.999 && distinct {
                prop_assert!(d.probs[min_lang] > p_min);
            }
        }

        #[test]
        fn sampling_is_pure(seed in 0u64..1000) {
            let streams: BTreeMap<_, _> = [
                ("en".to_string(), stream("en", 7)),
                ("mr".to_string(), stream("mr", 2)),
            ].into();
            let dist = compute_language_distribution(&counts(&[("en", 7), ("mr", 2)]), 0.5).unwrap();
            prop_assert_eq!(
                sample_corpus(&streams, &dist, 50, seed).unwrap(),
                sample_corpus(&streams, &dist, 50, seed).unwrap()
            );
        }
    }
}
