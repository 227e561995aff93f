//! Synthetic corpora: a general-domain written-text grammar (with a
//! pseudo-language variant for multilingual runs) and aggregated in-domain
//! utterance logs drawn from an NLU grammar.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{BasicRules, Form, Grammar, TextExample};
use crate::error::Result;
use crate::rng;

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "my", "our", "their"];
const ADJECTIVES: &[&str] = &[
    "old", "young", "big", "small", "red", "green", "quiet", "loud", "bright", "dark", "happy",
    "tired", "clever", "lazy", "warm", "cold", "tall", "short", "new", "ancient", "gentle", "brave",
    "heavy", "light", "busy",
];
const ANIMALS: &[&str] = &["dog", "cat", "horse", "bird", "fox", "cow", "sheep", "rabbit"];
const PEOPLE: &[&str] = &[
    "farmer", "teacher", "doctor", "child", "baker", "sailor", "soldier", "painter", "student", "king",
];
const FOODS: &[&str] = &["bread", "apple", "cheese", "soup", "cake", "fish", "rice", "honey"];
const DRINKS: &[&str] = &["water", "milk", "tea", "coffee", "wine"];
const WRITINGS: &[&str] = &["book", "letter", "newspaper", "poem", "map"];
const PLACES: &[&str] = &[
    "market", "river", "forest", "village", "garden", "church", "school", "harbor", "castle", "field",
];
const THINGS: &[&str] = &["hammer", "rope", "boat", "lamp", "basket", "wagon", "bell"];
const PREPOSITIONS: &[&str] = &["in", "near", "behind", "at", "across", "beside"];
const WHEN: &[&str] = &["yesterday", "today", "at dawn", "last winter", "in the evening", "before noon"];

/// Object classes each verb accepts.
const VERBS: &[(&str, &[&[&str]])] = &[
    ("ate", &[FOODS]),
    ("cooked", &[FOODS]),
    ("drank", &[DRINKS]),
    ("poured", &[DRINKS]),
    ("read", &[WRITINGS]),
    ("wrote", &[WRITINGS]),
    ("carried", &[THINGS, FOODS]),
    ("fixed", &[THINGS]),
    ("sold", &[THINGS, FOODS]),
    ("bought", &[THINGS, FOODS, DRINKS]),
    ("saw", &[ANIMALS, PEOPLE]),
    ("chased", &[ANIMALS]),
    ("followed", &[ANIMALS, PEOPLE]),
    ("fed", &[ANIMALS]),
];

/// Habitual (subject, verb, object) triples used for a share of sentences,
/// so nouns become predictable from context.
const HABITS: &[(&str, &str, &str)] = &[
    ("baker", "sold", "bread"),
    ("farmer", "fed", "cow"),
    ("teacher", "read", "book"),
    ("sailor", "fixed", "boat"),
    ("painter", "bought", "lamp"),
    ("student", "wrote", "letter"),
    ("king", "drank", "wine"),
    ("doctor", "drank", "tea"),
    ("child", "chased", "rabbit"),
    ("soldier", "carried", "rope"),
    ("cat", "drank", "milk"),
    ("dog", "chased", "fox"),
];

const FUNCTION_WORDS: &[&str] = &["and", "then", "with", "friends", "in", "at", "while", "was", "there"];

fn all_english_words() -> BTreeSet<&'static str> {
    let mut s = BTreeSet::new();
    for list in [
        DETERMINERS, ADJECTIVES, ANIMALS, PEOPLE, FOODS, DRINKS, WRITINGS, PLACES, THINGS,
        PREPOSITIONS, FUNCTION_WORDS,
    ] {
        s.extend(list.iter().copied());
    }
    for w in WHEN {
        s.extend(w.split_whitespace());
    }
    s.extend(VERBS.iter().map(|(v, _)| *v));
    s
}

fn nouns() -> impl Iterator<Item = &'static str> {
    [ANIMALS, PEOPLE, FOODS, DRINKS, WRITINGS, PLACES, THINGS]
        .into_iter()
        .flat_map(|l| l.iter().copied())
}

/// General-domain sentence generator for one language.
#[derive(Debug, Clone)]
pub struct GeneralGrammar {
    pub language: String,
    /// English word → surface form in this language.
    surface: BTreeMap<&'static str, String>,
}

impl GeneralGrammar {
    pub fn english() -> Self {
        GeneralGrammar {
            language: "en".into(),
            surface: all_english_words().into_iter().map(|w| (w, w.to_string())).collect(),
        }
    }

    /// A structurally identical language with a disjoint pseudo-vocabulary.
    pub fn pseudo(language: &str, key: u64) -> Self {
        let mut r = rng::derived(key, &[0x5E]);
        let mut used = BTreeSet::new();
        let mut surface = BTreeMap::new();
        for w in all_english_words() {
            let form = loop {
                let syll = 1 + w.len() / 4;
                let cand: String = (0..syll)
                    .map(|_| {
                        let c = ["k", "m", "t", "r", "v", "n", "dh", "p", "s", "g", "ch", "l"];
                        let v = ["a", "aa", "i", "u", "e", "o"];
                        format!("{}{}", c[r.random_range(0..c.len())], v[r.random_range(0..v.len())])
                    })
                    .collect();
                if used.insert(cand.clone()) {
                    break cand;
                }
            };
            surface.insert(w, form);
        }
        GeneralGrammar {
            language: language.to_string(),
            surface,
        }
    }

    fn w(&self, english: &str) -> &str {
        &self.surface[english]
    }

    fn phrase(&self, english: &str) -> String {
        english.split_whitespace().map(|w| self.w(w)).collect::<Vec<_>>().join(" ")
    }

    /// Nouns of this language (the mask-filling lexicon).
    pub fn noun_lexicon(&self) -> BTreeSet<String> {
        nouns().map(|n| self.w(n).to_string()).collect()
    }

    /// Spoken-form rules for pseudo-languages: digits read with pseudo words.
    pub fn basic_rules(&self) -> BasicRules {
        BasicRules {
            digits: std::array::from_fn(|i| format!("{}{}", ["n", "t", "k", "m", "r"][i % 5], ["ul", "ek"][i / 5])),
        }
    }

    fn noun_phrase(&self, rng: &mut rng::Rng, noun: &str) -> String {
        let mut parts = vec![self.w(DETERMINERS.choose(rng).expect("nonempty")).to_string()];
        if rng.random_bool(0.5) {
            parts.push(self.w(ADJECTIVES.choose(rng).expect("nonempty")).to_string());
        }
        parts.push(self.w(noun).to_string());
        parts.join(" ")
    }

    fn clause(&self, rng: &mut rng::Rng) -> String {
        let (subject, verb, object) = if rng.random_bool(0.4) {
            let (s, v, o) = *HABITS.choose(rng).expect("nonempty");
            (s, v, o)
        } else {
            let s = if rng.random_bool(0.7) { PEOPLE } else { ANIMALS }
                .choose(rng)
                .copied()
                .expect("nonempty");
            let (v, classes) = *VERBS.choose(rng).expect("nonempty");
            let o = classes.choose(rng).expect("nonempty").choose(rng).copied().expect("nonempty");
            (s, v, o)
        };
        let subj = self.noun_phrase(rng, subject);
        let obj = self.noun_phrase(rng, object);
        format!("{subj} {} {obj}", self.w(verb))
    }

    fn sentence(&self, rng: &mut rng::Rng) -> String {
        let mut s = self.clause(rng);
        match rng.random_range(0..6) {
            0 => {
                let place = PLACES.choose(rng).expect("nonempty");
                let prep = PREPOSITIONS.choose(rng).expect("nonempty");
                s = format!("{s} {} {} {}", self.w(prep), self.w("the"), self.w(place));
            }
            1 => {
                let h = rng.random_range(1..=12);
                let m = [0, 5, 15, 30, 45][rng.random_range(0..5)];
                let ampm = if rng.random_bool(0.5) { "AM" } else { "PM" };
                s = format!("{} {h}:{m:02}{ampm}, {s}", self.w("at"));
            }
            2 => {
                let year = rng.random_range(1800..2030);
                s = format!("{} {year}, {s}", self.w("in"));
            }
            3 => {
                let n = rng.random_range(2..40);
                s = format!("{s} {} {n} {}", self.w("with"), self.w("friends"));
            }
            4 => {
                let other = self.clause(rng);
                s = format!("{s} {} {} {other}", self.w("and"), self.w("then"));
            }
            _ => {
                let when = WHEN.choose(rng).expect("nonempty");
                s = format!("{s} {}", self.phrase(when));
            }
        }
        let mut chars = s.chars();
        let first = chars.next().map(|c| c.to_uppercase().collect::<String>()).unwrap_or_default();
        format!("{first}{}.", chars.as_str())
    }

    /// `n` written-form sentences.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<TextExample> {
        let mut rng = rng::derived(seed, &[rng::stream::SAMPLE, 0x6E]);
        (0..n)
            .map(|_| TextExample::new(self.sentence(&mut rng), &self.language, Form::Written, "general"))
            .collect()
    }
}

/// Samples `n` utterances from `grammar` and aggregates repeats into counts,
/// in first-seen order, as an anonymized usage log would.
pub fn in_domain_log(grammar: &Grammar, language: &str, n: usize, seed: u64) -> Result<Vec<TextExample>> {
    let utts = grammar.sample_utterances(n, seed)?;
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for u in utts {
        let c = counts.entry(u.clone()).or_insert(0);
        if *c == 0 {
            order.push(u);
        }
        *c += 1;
    }
    Ok(order
        .into_iter()
        .map(|u| {
            let c = counts[&u];
            TextExample::new(u, language, Form::Spoken, "inhouse").with_count(c)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::spoken_form_transform;

    #[test]
    fn lexicon_is_desk_sized() {
        let n = all_english_words().len();
        assert!((100..=260).contains(&n), "{n}");
        assert_eq!(GeneralGrammar::english().noun_lexicon().len(), 53);
    }

    #[test]
    fn english_sentences_are_written_form() {
        let g = GeneralGrammar::english();
        let recs = g.generate(200, 3);
        assert_eq!(recs.len(), 200);
        assert!(recs.iter().all(|r| r.text.ends_with('.') && r.form == Form::Written));
        assert!(recs.iter().any(|r| r.text.chars().any(|c| c.is_ascii_digit())));
        for r in &recs {
            let spoken = spoken_form_transform(&r.text, "en").unwrap();
            assert!(!spoken.contains('.') || spoken.contains("a. m.") || spoken.contains("p. m."));
        }
        assert_eq!(recs, g.generate(200, 3));
    }

    #[test]
    fn pseudo_language_is_disjoint() {
        let en = GeneralGrammar::english();
        let xx = GeneralGrammar::pseudo("mr", 1);
        let en_words = en.noun_lexicon();
        assert!(xx.noun_lexicon().iter().all(|w| !en_words.contains(w)));
        let recs = xx.generate(5, 1);
        assert!(recs.iter().all(|r| r.language == "mr"));
    }

    #[test]
    fn in_domain_log_aggregates() {
        let g = Grammar::preset("assistant").unwrap();
        let log = in_domain_log(&g, "en", 2000, 5).unwrap();
        let total: u64 = log.iter().map(|r| r.count).sum();
        assert_eq!(total, 2000);
        assert!(log.iter().any(|r| r.count > 1));
        let texts: BTreeSet<_> = log.iter().map(|r| &r.text).collect();
        assert_eq!(texts.len(), log.len());
    }
}
