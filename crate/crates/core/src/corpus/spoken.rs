//! Written-form to spoken-form conversion.
//!
//! Spoken form is lowercased, free of sentence punctuation, and has numbers
//! and clock times verbalized. Rules are registered per language; English
//! ships built in.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::{Captures, Regex};

use crate::error::{Error, Result};

pub trait SpokenFormRules: Send + Sync {
    fn transform(&self, text: &str) -> String;
}

const PUNCTUATION: &[char] = &['.', ',', '?', '!', ':', ';', '"', '(', ')'];

const ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// English cardinal for `0..=9999`.
fn cardinal(n: u32) -> String {
    debug_assert!(n < 10_000);
    if n < 20 {
        return ONES[n as usize].to_string();
    }
    if n < 100 {
        let t = TENS[(n / 10) as usize];
        return match n % 10 {
            0 => t.to_string(),
            u => format!("{t} {}", ONES[u as usize]),
        };
    }
    let (head, unit, rest) = if n < 1000 {
        (n / 100, "hundred", n % 100)
    } else {
        (n / 1000, "thousand", n % 1000)
    };
    let mut out = format!("{} {unit}", cardinal(head));
    if rest > 0 {
        out.push(' ');
        out.push_str(&cardinal(rest));
    }
    out
}

/// Verbalizes one run of ASCII digits. Runs of five or more digits, and
/// multi-digit runs with a leading zero, are read digit by digit.
fn verbalize_digits(run: &str) -> String {
    if run.len() >= 5 || (run.len() > 1 && run.starts_with('0')) {
        run.bytes()
            .map(|b| ONES[(b - b'0') as usize])
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        cardinal(run.parse().expect("ascii digits"))
    }
}

fn clock_time(caps: &Captures) -> Option<String> {
    let hour: u32 = caps[1].parse().ok()?;
    let minute: u32 = caps[2].parse().ok()?;
    let meridiem = caps.get(3).map(|m| m.as_str());
    let hour_ok = match meridiem {
        Some(_) => (1..=12).contains(&hour),
        None => hour <= 24,
    };
    if !hour_ok || minute > 59 {
        return None;
    }
    let mut out = cardinal(hour);
    match (minute, meridiem) {
        (0, Some(_)) => {}
        (0, None) => out.push_str(" o'clock"),
        (1..=9, _) => {
            out.push_str(" oh ");
            out.push_str(ONES[minute as usize]);
        }
        _ => {
            out.push(' ');
            out.push_str(&cardinal(minute));
        }
    }
    if let Some(m) = meridiem {
        out.push_str(if m == "a" { " a. m." } else { " p. m." });
    }
    Some(format!(" {out} "))
}

fn time_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b(\d{1,2}):(\d{2})(?:\s*([ap])\.?\s*m\b\.?)?").expect("valid regex")
    })
}

fn grouped_number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d),(\d{3})").expect("valid regex"))
}

fn digits_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9]+").expect("valid regex"))
}

/// Strips sentence punctuation token by token, keeping intra-word
/// apostrophes and the `a. m.` / `p. m.` pair intact.
fn strip_punctuation(text: &str) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if (t == "a." || t == "p.") && tokens.get(i + 1) == Some(&"m.") {
            out.push(t.to_string());
            out.push("m.".to_string());
            i += 2;
            continue;
        }
        let cleaned: String = t.chars().filter(|c| !PUNCTUATION.contains(c)).collect();
        let cleaned = cleaned.trim_matches('\'');
        if !cleaned.is_empty() {
            out.push(cleaned.to_string());
        }
        i += 1;
    }
    out.join(" ")
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EnglishRules;

impl SpokenFormRules for EnglishRules {
    fn transform(&self, text: &str) -> String {
        let mut s = text.to_lowercase();
        s = time_regex()
            .replace_all(&s, |c: &Captures| clock_time(c).unwrap_or_else(|| c[0].to_string()))
            .into_owned();
        while grouped_number_regex().is_match(&s) {
            s = grouped_number_regex().replace_all(&s, "$1$2").into_owned();
        }
        s = digits_regex()
            .replace_all(&s, |c: &Captures| format!(" {} ", verbalize_digits(&c[0])))
            .into_owned();
        strip_punctuation(&s)
    }
}

/// Lowercasing, punctuation stripping and digit-by-digit number reading with
/// a caller-supplied digit vocabulary. A starting point for languages
/// without dedicated rules.
#[derive(Debug, Clone)]
pub struct BasicRules {
    pub digits: [String; 10],
}

impl SpokenFormRules for BasicRules {
    fn transform(&self, text: &str) -> String {
        let lower = text.to_lowercase();
        let s = digits_regex().replace_all(&lower, |c: &Captures| {
            let words: Vec<&str> = c[0].bytes().map(|b| self.digits[(b - b'0') as usize].as_str()).collect();
            format!(" {} ", words.join(" "))
        });
        strip_punctuation(&s)
    }
}

#[derive(Default)]
pub struct SpokenFormRegistry {
    rules: BTreeMap<String, Box<dyn SpokenFormRules>>,
}

impl SpokenFormRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_english() -> Self {
        let mut r = Self::empty();
        r.register("en", EnglishRules);
        r
    }

    pub fn register(&mut self, lang: impl Into<String>, rules: impl SpokenFormRules + 'static) {
        self.rules.insert(lang.into(), Box::new(rules));
    }

    pub fn supports(&self, lang: &str) -> bool {
        self.rules.contains_key(lang)
    }

    pub fn transform(&self, text: &str, lang: &str) -> Result<String> {
        self.rules
            .get(lang)
            .map(|r| r.transform(text))
            .ok_or_else(|| Error::config(format!("no spoken-form rules registered for `{lang}`")))
    }
}

/// Converts with the built-in rule set (English only).
pub fn spoken_form_transform(text: &str, lang: &str) -> Result<String> {
    static DEFAULT: OnceLock<SpokenFormRegistry> = OnceLock::new();
    DEFAULT
        .get_or_init(SpokenFormRegistry::with_english)
        .transform(text, lang)
}
