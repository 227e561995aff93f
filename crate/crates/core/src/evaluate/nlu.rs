use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{chunks, BioTag, NluExample, SlotChunk};
use crate::error::{Error, Result};

/// A model's output for one utterance, aligned to its whitespace words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub intent: String,
    pub slots: Vec<BioTag>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemErCounts {
    pub correct: u64,
    pub deletion: u64,
    pub insertion: u64,
    pub substitution: u64,
}

impl SemErCounts {
    pub fn new(correct: u64, deletion: u64, insertion: u64, substitution: u64) -> Self {
        SemErCounts { correct, deletion, insertion, substitution }
    }

    pub fn add(&mut self, o: &SemErCounts) {
        self.correct += o.correct;
        self.deletion += o.deletion;
        self.insertion += o.insertion;
        self.substitution += o.substitution;
    }
}

fn check_aligned(reference: &NluExample, hyp: &Prediction) -> Result<()> {
    let n = reference.words().len();
    if hyp.slots.len() != n {
        return Err(Error::validation(format!(
            "hypothesis has {} tags for {n} reference words",
            hyp.slots.len()
        )));
    }
    Ok(())
}

/// Matches reference slot chunks (name + value) against hypothesis chunks.
/// Exact name and value → correct; same name, different value →
/// substitution; unmatched reference chunk → deletion; leftover hypothesis
/// chunk → insertion. The intent counts as one more unit, and a wrong intent
/// is a substitution.
pub fn semer_counts(reference: &NluExample, hyp: &Prediction) -> Result<SemErCounts> {
    check_aligned(reference, hyp)?;
    let words = reference.words();
    let value = |c: &SlotChunk| words[c.start..c.end].join(" ");
    let refs: Vec<(String, String)> = reference.chunks().iter().map(|c| (c.name.clone(), value(c))).collect();
    let mut hyps: Vec<Option<(String, String)>> = chunks(&hyp.slots).iter().map(|c| Some((c.name.clone(), value(c)))).collect();
    let mut counts = SemErCounts::default();
    let mut unmatched = Vec::new();
    for r in &refs {
        match hyps.iter().position(|h| h.as_ref() == Some(r)) {
            Some(i) => {
                hyps[i] = None;
                counts.correct += 1;
            }
            None => unmatched.push(r),
        }
    }
    for r in unmatched {
        match hyps.iter().position(|h| h.as_ref().is_some_and(|h| h.0 == r.0)) {
            Some(i) => {
                hyps[i] = None;
                counts.substitution += 1;
            }
            None => counts.deletion += 1,
        }
    }
    counts.insertion += hyps.iter().flatten().count() as u64;
    if reference.intent == hyp.intent {
        counts.correct += 1;
    } else {
        counts.substitution += 1;
    }
    Ok(counts)
}

/// `(D + I + S) / (C + D + S)`.
pub fn semer(c: &SemErCounts) -> Result<f64> {
    let denom = c.correct + c.deletion + c.substitution;
    if denom == 0 {
        return Err(Error::validation("SemER denominator is zero"));
    }
    Ok((c.deletion + c.insertion + c.substitution) as f64 / denom as f64)
}

fn check_pairs(refs: &[NluExample], hyps: &[Prediction]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::validation(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    for (r, h) in refs.iter().zip(hyps) {
        check_aligned(r, h)?;
    }
    Ok(())
}

/// Corpus SemER over aggregated counts.
pub fn corpus_semer(refs: &[NluExample], hyps: &[Prediction]) -> Result<(f64, SemErCounts)> {
    check_pairs(refs, hyps)?;
    let mut total = SemErCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&semer_counts(r, h)?);
    }
    Ok((semer(&total)?, total))
}

fn exact(r: &NluExample, h: &Prediction) -> bool {
    r.intent == h.intent && r.chunks() == chunks(&h.slots)
}

/// Fraction of examples with a wrong intent or any differing slot chunk.
pub fn exact_match_error(refs: &[NluExample], hyps: &[Prediction]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    if refs.is_empty() {
        return Err(Error::validation("exact match needs at least one example"));
    }
    let wrong = refs.iter().zip(hyps).filter(|(r, h)| !exact(r, h)).count();
    Ok(wrong as f64 / refs.len() as f64)
}

/// Micro-averaged chunk precision/recall/F1 over `(example, name, start, end)`.
/// With no gold and no predicted chunks F1 is 1.
pub fn chunk_f1(refs: &[NluExample], hyps: &[Prediction]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        let gold = r.chunks();
        let pred = chunks(&h.slots);
        n_gold += gold.len();
        n_pred += pred.len();
        tp += pred.iter().filter(|c| gold.contains(c)).count();
    }
    if n_gold == 0 && n_pred == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    Ok(2.0 * p * r / (p + r))
}

/// `(1 − intent accuracy, 1 − chunk micro-F1)`.
pub fn ic_sf_errors(refs: &[NluExample], hyps: &[Prediction]) -> Result<(f64, f64)> {
    check_pairs(refs, hyps)?;
    if refs.is_empty() {
        return Err(Error::validation("intent error needs at least one example"));
    }
    let wrong = refs.iter().zip(hyps).filter(|(r, h)| r.intent != h.intent).count();
    Ok((wrong as f64 / refs.len() as f64, 1.0 - chunk_f1(refs, hyps)?))
}

/// Token-level slot error: fraction of words whose predicted tag differs.
pub fn token_slot_error(refs: &[NluExample], hyps: &[Prediction]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let (mut wrong, mut total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        total += r.slots.len();
        wrong += r.slots.iter().zip(&h.slots).filter(|(a, b)| a != b).count();
    }
    if total == 0 {
        return Err(Error::validation("token slot error needs at least one word"));
    }
    Ok(wrong as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NluMetrics {
    pub semer: f64,
    pub exact_match_error: f64,
    pub ic_error: f64,
    pub sf_error: f64,
    pub counts: SemErCounts,
    pub examples: usize,
}

pub fn nlu_metrics(refs: &[NluExample], hyps: &[Prediction]) -> Result<NluMetrics> {
    let (s, counts) = corpus_semer(refs, hyps)?;
    let (ic, sf) = ic_sf_errors(refs, hyps)?;
    Ok(NluMetrics {
        semer: s,
        exact_match_error: exact_match_error(refs, hyps)?,
        ic_error: ic,
        sf_error: sf,
        counts,
        examples: refs.len(),
    })
}

/// Example-count-weighted mean of per-group values.
pub fn weighted_mean(groups: &BTreeMap<String, (f64, usize)>) -> Result<f64> {
    let n: usize = groups.values().map(|g| g.1).sum();
    if n == 0 {
        return Err(Error::validation("no examples in any group"));
    }
    Ok(groups.values().map(|(v, c)| v * *c as f64).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(u: &str, intent: &str, tags: &str) -> NluExample {
        NluExample { utterance: u.into(), intent: intent.into(), slots: tags.split(' ').map(String::from).collect() }
    }

    fn pred(intent: &str, tags: &str) -> Prediction {
        Prediction { intent: intent.into(), slots: tags.split(' ').map(String::from).collect() }
    }

    #[test]
    fn hand_cases() {
        let r = ex("wake me at seven tomorrow", "set_alarm", "O O O B-time B-date");
        let c = semer_counts(&r, &pred("set_alarm", "O O O B-time B-date")).unwrap();
        assert_eq!(c, SemErCounts::new(3, 0, 0, 0));
        assert_eq!(semer(&c).unwrap(), 0.0);

        let r1 = ex("call mom", "call_contact", "O B-contact");
        let c = semer_counts(&r1, &pred("call_contact", "O O")).unwrap();
        assert_eq!(c, SemErCounts::new(1, 1, 0, 0));
        assert_eq!(semer(&c).unwrap(), 0.5);

        let r2 = ex("hello there", "greet", "O O");
        let c = semer_counts(&r2, &pred("bye", "O O")).unwrap();
        assert_eq!(c, SemErCounts::new(0, 0, 0, 1));

        assert_eq!(semer(&SemErCounts::new(1, 0, 1, 0)).unwrap(), 1.0);
        assert!(semer(&SemErCounts::new(1, 0, 3, 0)).unwrap() > 1.0);
        assert!(semer(&SemErCounts::default()).is_err());
    }

    #[test]
    fn wrong_value_is_substitution_and_new_name_is_insertion() {
        let r = ex("play jazz by miles", "play_music", "O B-song O B-artist");
        let c = semer_counts(&r, &pred("play_music", "O B-song I-song B-artist")).unwrap();
        assert_eq!(c, SemErCounts::new(2, 0, 0, 1));
        let c = semer_counts(&r, &pred("play_music", "B-item B-song O B-artist")).unwrap();
        assert_eq!(c, SemErCounts::new(3, 0, 1, 0));
        assert!(semer_counts(&r, &pred("play_music", "O O")).is_err());
    }

    #[test]
    fn exact_match_and_boundaries() {
        let refs = vec![ex("a b c", "x", "B-s I-s O"), ex("d e", "y", "O B-t")];
        let perfect = vec![pred("x", "B-s I-s O"), pred("y", "O B-t")];
        assert_eq!(exact_match_error(&refs, &perfect).unwrap(), 0.0);
        let boundary = vec![pred("x", "B-s B-s O"), pred("y", "O B-t")];
        assert_eq!(exact_match_error(&refs, &boundary).unwrap(), 0.5);
        let (ic, sf) = ic_sf_errors(&refs, &perfect).unwrap();
        assert_eq!((ic, sf), (0.0, 0.0));
        let half = vec![pred("z", "B-s I-s O"), pred("y", "O B-t")];
        assert_eq!(ic_sf_errors(&refs, &half).unwrap(), (0.5, 0.0));
        assert!(exact_match_error(&refs, &half).unwrap() >= 0.5);
    }

    #[test]
    fn chunk_f1_hand_table() {
        // gold: 3 chunks; predicted: 2 chunks, 1 correct → P=1/2, R=1/3, F1=0.4
        let refs = vec![ex("a b c d", "x", "B-s O B-t B-u")];
        let hyps = vec![pred("x", "B-s O O B-t")];
        assert!((chunk_f1(&refs, &hyps).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(token_slot_error(&refs, &hyps).unwrap(), 0.5);
    }

    #[test]
    fn weighted_breakdown_reproduces_pooled() {
        let en = vec![ex("a b", "x", "O B-s"), ex("c", "y", "O"), ex("d", "y", "O")];
        let de = vec![ex("e f", "x", "B-s O")];
        let en_h = vec![pred("x", "O B-s"), pred("x", "O"), pred("y", "O")];
        let de_h = vec![pred("x", "O O")];
        let mut groups = BTreeMap::new();
        groups.insert("en".to_string(), (exact_match_error(&en, &en_h).unwrap(), en.len()));
        groups.insert("de".to_string(), (exact_match_error(&de, &de_h).unwrap(), de.len()));
        let pooled: Vec<_> = en.iter().chain(&de).cloned().collect();
        let pooled_h: Vec<_> = en_h.iter().chain(&de_h).cloned().collect();
        let p = exact_match_error(&pooled, &pooled_h).unwrap();
        assert!((weighted_mean(&groups).unwrap() - p).abs() < 1e-9);
    }
}
