//! Labeled NLU data: utterances with an intent and word-aligned BIO slot tags,
//! plus a template-grammar generator for synthetic datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

pub type BioTag = String;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NluExample {
    pub utterance: String,
    pub intent: String,
    /// One tag per whitespace token; serialized space-joined.
    #[serde(serialize_with = "ser_tags", deserialize_with = "de_tags")]
    pub slots: Vec<BioTag>,
}

fn ser_tags<S: Serializer>(tags: &[BioTag], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&tags.join(" "))
}

fn de_tags<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<BioTag>, D::Error> {
    let s = String::deserialize(d)?;
    Ok(s.split_whitespace().map(str::to_string).collect())
}

/// A labeled slot span `[start, end)` over word positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotChunk {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl NluExample {
    pub fn words(&self) -> Vec<&str> {
        self.utterance.split_whitespace().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.words().len();
        if n == 0 {
            return Err(Error::validation("utterance is empty"));
        }
        if n != self.slots.len() {
            return Err(Error::validation(format!(
                "`{}` has {n} words but {} slot tags",
                self.utterance,
                self.slots.len()
            )));
        }
        if !bio_well_formed(&self.slots) {
            return Err(Error::validation(format!(
                "malformed BIO sequence for `{}`",
                self.utterance
            )));
        }
        Ok(())
    }

    pub fn chunks(&self) -> Vec<SlotChunk> {
        chunks(&self.slots)
    }

    /// Slot value text of a chunk.
    pub fn chunk_value(&self, chunk: &SlotChunk) -> String {
        self.words()[chunk.start..chunk.end].join(" ")
    }
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    let (prefix, name) = tag.split_once('-')?;
    match prefix {
        "B" => Some(('B', name)),
        "I" => Some(('I', name)),
        _ => None,
    }
}

/// `true` iff every `I-X` continues a `B-X` or `I-X`, and every tag is `O`,
/// `B-X` or `I-X`.
pub fn bio_well_formed(tags: &[BioTag]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        if t == "O" {
            prev = None;
            continue;
        }
        match split_tag(t) {
            Some(('B', name)) => prev = Some(name),
            Some(('I', name)) if prev == Some(name) => {}
            _ => return false,
        }
    }
    true
}

/// Rewrites `I-X` without a preceding `B-X`/`I-X` to `B-X`; unknown tags
/// become `O`.
pub fn repair_bio(tags: &mut [BioTag]) {
    let mut prev: Option<String> = None;
    for t in tags.iter_mut() {
        match split_tag(t).map(|(p, n)| (p, n.to_string())) {
            Some(('B', name)) => prev = Some(name),
            Some(('I', name)) => {
                if prev.as_deref() != Some(name.as_str()) {
                    *t = format!("B-{name}");
                }
                prev = Some(name);
            }
            _ => {
                *t = "O".to_string();
                prev = None;
            }
        }
    }
}

/// Extracts chunks from a BIO sequence. A stray `I-X` opens a new chunk.
pub fn chunks(tags: &[BioTag]) -> Vec<SlotChunk> {
    let mut out = Vec::new();
    let mut open: Option<SlotChunk> = None;
    for (i, t) in tags.iter().enumerate() {
        let parsed = split_tag(t);
        let continues = matches!((&open, parsed), (Some(c), Some(('I', n))) if c.name == n);
        if continues {
            open.as_mut().expect("checked").end = i + 1;
            continue;
        }
        out.extend(open.take());
        if let Some((_, name)) = parsed {
            open = Some(SlotChunk {
                name: name.to_string(),
                start: i,
                end: i + 1,
            });
        }
    }
    out.extend(open);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    /// Whitespace-tokenized templates. A token `{lexicon}` or
    /// `{lexicon:label}` is filled from the named lexicon and tagged with the
    /// label (default: the lexicon name).
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub intents: Vec<IntentSpec>,
    pub lexicons: BTreeMap<String, Vec<String>>,
}

enum Piece<'a> {
    Word(&'a str),
    Slot { lexicon: &'a str, label: &'a str },
}

fn parse_template(t: &str) -> Vec<Piece<'_>> {
    t.split_whitespace()
        .map(|tok| match tok.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(inner) => {
                let (lexicon, label) = inner.split_once(':').unwrap_or((inner, inner));
                Piece::Slot { lexicon, label }
            }
            None => Piece::Word(tok),
        })
        .collect()
}

impl Grammar {
    pub fn slot_labels(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for intent in &self.intents {
            for t in &intent.templates {
                for p in parse_template(t) {
                    if let Piece::Slot { label, .. } = p {
                        out.insert(label.to_string());
                    }
                }
            }
        }
        out
    }

    fn check(&self) -> Result<()> {
        let names: BTreeSet<_> = self.intents.iter().map(|i| &i.name).collect();
        if names.len() < 2 {
            return Err(Error::validation("grammar needs at least two intents"));
        }
        if self.slot_labels().len() < 2 {
            return Err(Error::validation("grammar needs at least two slot types"));
        }
        for intent in &self.intents {
            if intent.templates.is_empty() {
                return Err(Error::Generation(format!("intent `{}` has no templates", intent.name)));
            }
            for t in &intent.templates {
                let pieces = parse_template(t);
                if pieces.is_empty() {
                    return Err(Error::Generation(format!("empty template in `{}`", intent.name)));
                }
                for p in pieces {
                    if let Piece::Slot { lexicon, .. } = p {
                        let ok = self
                            .lexicons
                            .get(lexicon)
                            .is_some_and(|vals| !vals.is_empty() && vals.iter().all(|v| !v.trim().is_empty()));
                        if !ok {
                            return Err(Error::Generation(format!(
                                "template `{t}` references missing or empty lexicon `{lexicon}`"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut rng::Rng) -> NluExample {
        let intent = self.intents.choose(rng).expect("checked nonempty");
        let template = intent.templates.choose(rng).expect("checked nonempty");
        let mut words = Vec::new();
        let mut tags = Vec::new();
        for piece in parse_template(template) {
            match piece {
                Piece::Word(w) => {
                    words.push(w.to_string());
                    tags.push("O".to_string());
                }
                Piece::Slot { lexicon, label } => {
                    let value = self.lexicons[lexicon].choose(rng).expect("checked nonempty");
                    for (k, w) in value.split_whitespace().enumerate() {
                        words.push(w.to_string());
                        tags.push(if k == 0 { format!("B-{label}") } else { format!("I-{label}") });
                    }
                }
            }
        }
        NluExample {
            utterance: words.join(" "),
            intent: intent.name.clone(),
            slots: tags,
        }
    }

    /// Unlabeled utterances from the same grammar (duplicates allowed).
    pub fn sample_utterances(&self, n: usize, seed: u64) -> Result<Vec<String>> {
        self.check()?;
        let mut rng = rng::derived(seed, &[rng::stream::SAMPLE, 0x17]);
        Ok((0..n).map(|_| self.sample(&mut rng).utterance).collect())
    }

    /// Built-in grammars: `assistant` (a small hand-written English assistant
    /// domain) and `domain1-like` / `domain2-like` / `domain3-like`, synthetic
    /// grammars with 16/98, 8/25 and 12/56 intents/slot types.
    pub fn preset(name: &str) -> Result<Grammar> {
        match name {
            "assistant" => Ok(assistant_grammar()),
            "domain1-like" => Ok(synthetic_domain(16, 98, 0xD1)),
            "domain2-like" => Ok(synthetic_domain(8, 25, 0xD2)),
            "domain3-like" => Ok(synthetic_domain(12, 56, 0xD3)),
            other => Err(Error::config(format!("unknown grammar preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NluSplits {
    pub train: Vec<NluExample>,
    pub val: Vec<NluExample>,
    pub test: Vec<NluExample>,
}

fn labels_of(e: &NluExample) -> impl Iterator<Item = &str> {
    std::iter::once(e.intent.as_str()).chain(e.slots.iter().map(String::as_str))
}

/// Generates three splits that are disjoint at the utterance level, with
/// validation and test labels restricted to labels seen in training.
pub fn generate_synthetic_nlu(
    grammar: &Grammar,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<NluSplits> {
    grammar.check()?;
    let mut rng = rng::derived(seed, &[rng::stream::SAMPLE]);
    let mut seen: HashSet<String> = HashSet::new();
    let mut train_labels: HashSet<String> = HashSet::new();
    let mut splits = NluSplits::default();
    for (split, n) in [(0, n_train), (1, n_val), (2, n_test)] {
        let budget = 200 * n + 1000;
        let mut attempts = 0;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Generation(format!(
                    "could not draw {n} distinct utterances for split {split} after {budget} attempts"
                )));
            }
            let ex = grammar.sample(&mut rng);
            if seen.contains(&ex.utterance) {
                continue;
            }
            if split > 0 && !labels_of(&ex).all(|l| train_labels.contains(l)) {
                continue;
            }
            seen.insert(ex.utterance.clone());
            if split == 0 {
                train_labels.extend(labels_of(&ex).map(str::to_string));
            }
            out.push(ex);
        }
        match split {
            0 => splits.train = out,
            1 => splits.val = out,
            _ => splits.test = out,
        }
    }
    Ok(splits)
}

fn lex(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn assistant_grammar() -> Grammar {
    let intent = |name: &str, templates: &[&str]| IntentSpec {
        name: name.to_string(),
        templates: templates.iter().map(|t| t.to_string()).collect(),
    };
    let intents = vec![
        intent("set_alarm", &[
            "set an alarm for {time}",
            "wake me up at {time}",
            "set an alarm for {time} {date}",
            "please wake me at {time} {date}",
        ]),
        intent("set_timer", &[
            "set a timer for {duration}",
            "start a timer for {duration}",
            "remind me in {duration}",
        ]),
        intent("play_music", &[
            "play {song}",
            "play {song} by {artist}",
            "i want to hear {song}",
            "play something by {artist}",
        ]),
        intent("play_podcast", &[
            "play {podcast}",
            "play the latest episode of {podcast}",
            "i want to hear {podcast}",
            "resume {podcast}",
        ]),
        intent("get_weather", &[
            "what is the weather in {city} {date}",
            "will it rain in {city} {date}",
            "how cold is it in {city}",
            "weather for {city}",
        ]),
        intent("book_flight", &[
            "book a flight from {city:from_city} to {city:to_city}",
            "find a flight to {city:to_city} from {city:from_city} {date}",
            "fly me from {city:from_city} to {city:to_city} {date}",
        ]),
        intent("add_to_list", &[
            "add {item} to my {list} list",
            "put {item} on the {list} list",
            "add {item} to {list}",
        ]),
        intent("call_contact", &[
            "call {contact}",
            "phone {contact} {date}",
            "ring {contact} at {time}",
        ]),
    ];
    let lexicons = BTreeMap::from([
        ("time".to_string(), lex(&[
            "seven thirty a. m.", "six a. m.", "nine fifteen p. m.", "eight oh five a. m.",
            "noon", "midnight", "ten forty five p. m.", "five a. m.", "eleven twenty p. m.",
            "four oh two a. m.",
        ])),
        ("date".to_string(), lex(&[
            "today", "tomorrow", "on monday", "on friday", "this weekend", "next tuesday",
            "tonight", "on sunday morning",
        ])),
        ("duration".to_string(), lex(&[
            "five minutes", "ten minutes", "an hour", "thirty seconds", "two hours",
            "ninety minutes", "twenty five minutes",
        ])),
        ("song".to_string(), lex(&[
            "velmora", "quintaro nights", "the silver kettle", "dovani", "marlowe rain",
            "brisk ember", "solenne", "the last tramline", "orvella", "kestrin blue",
        ])),
        ("artist".to_string(), lex(&[
            "the zorvics", "amara quell", "dj tolvane", "perrin and the halls", "selka",
            "nova trence",
        ])),
        ("podcast".to_string(), lex(&[
            "morning brellix", "the quorra hour", "tandem talk", "vesper notes",
            "the oddly show", "fennick weekly", "drift radio", "coda sessions",
        ])),
        ("city".to_string(), lex(&[
            "boston", "paris", "lisbon", "osaka", "denver", "cairo", "lima", "oslo",
            "quebec", "perth",
        ])),
        ("item".to_string(), lex(&[
            "milk", "eggs", "paper towels", "coffee beans", "batteries", "olive oil",
            "dish soap", "bread",
        ])),
        ("list".to_string(), lex(&["shopping", "grocery", "todo", "packing", "hardware"])),
        ("contact".to_string(), lex(&[
            "mom", "dad", "grandma", "doctor reyes", "aunt lisa", "the office", "sam",
        ])),
    ]);
    Grammar { intents, lexicons }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn pseudo_word(rng: &mut rng::Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS[rng.random_range(0..ONSETS.len())],
                NUCLEI[rng.random_range(0..NUCLEI.len())]
            )
        })
        .collect()
}

/// A grammar with `n_intents` intents and `n_slots` slot types over a
/// pronounceable pseudo-vocabulary. Each intent has three templates; slot
/// types are dealt round-robin across templates so every one is used.
fn synthetic_domain(n_intents: usize, n_slots: usize, key: u64) -> Grammar {
    let mut rng = rng::derived(key, &[0xD0]);
    let carrier: Vec<String> = (0..60).map(|_| pseudo_word(&mut rng, 2)).collect();
    let n_templates = n_intents * 3;
    let mut template_slots: Vec<Vec<usize>> = vec![Vec::new(); n_templates];
    for s in 0..n_slots {
        template_slots[s % n_templates].push(s);
    }
    let mut intents = Vec::new();
    for i in 0..n_intents {
        let mut templates = Vec::new();
        for t in 0..3 {
            let slots = &template_slots[i * 3 + t];
            let mut toks = vec![carrier[(i * 3 + t) % carrier.len()].clone()];
            toks.push(carrier[(i * 7 + t * 3 + 1) % carrier.len()].clone());
            for s in slots {
                toks.push(carrier[(s * 5 + 2) % carrier.len()].clone());
                toks.push(format!("{{slot_{s:03}}}"));
            }
            templates.push(toks.join(" "));
        }
        intents.push(IntentSpec {
            name: format!("intent_{i:02}"),
            templates,
        });
    }
    let lexicons = (0..n_slots)
        .map(|s| {
            let values = (0..6)
                .map(|v| {
                    let n_words = 1 + (v % 2);
                    (0..n_words).map(|_| pseudo_word(&mut rng, 2 + (v % 2))).collect::<Vec<_>>().join(" ")
                })
                .collect();
            (format!("slot_{s:03}"), values)
        })
        .collect();
    Grammar { intents, lexicons }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<BioTag> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bio_checks() {
        assert!(bio_well_formed(&tags("O B-a I-a O B-b")));
        assert!(!bio_well_formed(&tags("O I-a")));
        assert!(!bio_well_formed(&tags("B-a I-b")));
        assert!(!bio_well_formed(&tags("X-a")));
        let mut t = tags("I-a I-a O I-b B-c I-c");
        repair_bio(&mut t);
        assert_eq!(t, tags("B-a I-a O B-b B-c I-c"));
    }

    #[test]
    fn chunk_extraction() {
        let c = chunks(&tags("B-a I-a O B-b B-b I-a"));
        let spans: Vec<_> = c.iter().map(|c| (c.name.as_str(), c.start, c.end)).collect();
        assert_eq!(spans, vec![("a", 0, 2), ("b", 3, 4), ("b", 4, 5), ("a", 5, 6)]);
    }

    #[test]
    fn file_format_uses_space_joined_tags() {
        let e = NluExample {
            utterance: "call mom".into(),
            intent: "call_contact".into(),
            slots: tags("O B-contact"),
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(line, r#"{"utterance":"call mom","intent":"call_contact","slots":"O B-contact"}"#);
        assert_eq!(serde_json::from_str::<NluExample>(&line).unwrap(), e);
    }

    #[test]
    fn domain1_preset_shape() {
        let g = Grammar::preset("domain1-like").unwrap();
        assert_eq!(g.intents.len(), 16);
        assert_eq!(g.slot_labels().len(), 98);
        let g2 = Grammar::preset("domain2-like").unwrap();
        assert_eq!((g2.intents.len(), g2.slot_labels().len()), (8, 25));
        assert!(Grammar::preset("nope").is_err());
    }

    #[test]
    fn splits_are_disjoint_and_label_closed() {
        let g = Grammar::preset("assistant").unwrap();
        let s = generate_synthetic_nlu(&g, 300, 60, 60, 4).unwrap();
        let mut all = HashSet::new();
        for e in s.train.iter().chain(&s.val).chain(&s.test) {
            e.validate().unwrap();
            assert!(all.insert(e.utterance.clone()), "duplicate {}", e.utterance);
        }
        let train: HashSet<&str> = s.train.iter().flat_map(labels_of).collect();
        for e in s.val.iter().chain(&s.test) {
            assert!(labels_of(e).all(|l| train.contains(l)));
        }
    }

    #[test]
    fn empty_train_is_valid() {
        let g = Grammar::preset("assistant").unwrap();
        let s = generate_synthetic_nlu(&g, 0, 0, 0, 1).unwrap();
        assert!(s.train.is_empty() && s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let g = Grammar::preset("domain1-like").unwrap();
        let a = generate_synthetic_nlu(&g, 50, 10, 10, 9).unwrap();
        let b = generate_synthetic_nlu(&g, 50, 10, 10, 9).unwrap();
        assert_eq!(crate::io::to_jsonl(&a.train), crate::io::to_jsonl(&b.train));
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_nlu(&g, 50, 10, 10, 10).unwrap());
    }

    #[test]
    fn bad_grammars() {
        let mut g = Grammar::preset("assistant").unwrap();
        g.intents[0].templates.push("set {missing}".into());
        assert!(matches!(generate_synthetic_nlu(&g, 1, 0, 0, 1), Err(Error::Generation(_))));
        let mut g = Grammar::preset("assistant").unwrap();
        g.intents.truncate(1);
        assert!(matches!(generate_synthetic_nlu(&g, 1, 0, 0, 1), Err(Error::Validation(_))));
        // too few distinct utterances
        let tiny = Grammar {
            intents: vec![
                IntentSpec { name: "a".into(), templates: vec!["x {p}".into()] },
                IntentSpec { name: "b".into(), templates: vec!["y {q}".into()] },
            ],
            lexicons: BTreeMap::from([("p".into(), lex(&["1"])), ("q".into(), lex(&["2"]))]),
        };
        assert!(matches!(generate_synthetic_nlu(&tiny, 5, 0, 0, 1), Err(Error::Generation(_))));
    }

    proptest! {
        #[test]
        fn generated_examples_are_well_formed(seed in 0u64..200) {
            let g = Grammar::preset("domain3-like").unwrap();
            let s = generate_synthetic_nlu(&g, 20, 5, 5, seed).unwrap();
            for e in s.train.iter().chain(&s.val).chain(&s.test) {
                prop_assert!(e.validate().is_ok());
            }
        }
    }
}
