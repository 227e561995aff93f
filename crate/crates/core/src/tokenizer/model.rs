use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

/// Prefixed to every whitespace-delimited word before segmentation.
pub const WORD_MARKER: char = '\u{2581}';

const UNK_SURFACE: &str = "\u{2047}";
const UNK_PENALTY: f64 = 10.0;

/// A trained unigram vocabulary. Ids `0..5` are the special tokens; piece
/// `k` has id `5 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pieces: Vec<(String, f64)>,
    forced: BTreeSet<String>,
    lookup: HashMap<String, u32>,
    max_piece_chars: usize,
    unk_score: f64,
}

/// One segmentation step: the piece id (or `UNK`) covering `chars[start..end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Arc {
    end: usize,
    id: u32,
    score: f64,
}

impl TokenizerModel {
    pub fn new(pieces: Vec<(String, f64)>, forced: BTreeSet<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (k, (p, lp)) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(|c| c.is_whitespace()) {
                return Err(Error::config(format!("invalid piece {p:?}")));
            }
            if SPECIALS.contains(&p.as_str()) {
                return Err(Error::config(format!("piece {p:?} collides with a special token")));
            }
            if !(lp.is_finite() && *lp <= 0.0) {
                return Err(Error::config(format!("piece {p:?} has log-probability {lp}")));
            }
            if lookup.insert(p.clone(), NUM_SPECIALS + k as u32).is_some() {
                return Err(Error::config(format!("duplicate piece {p:?}")));
            }
            max_piece_chars = max_piece_chars.max(p.chars().count());
        }
        if let Some(f) = forced.iter().find(|f| !lookup.contains_key(*f)) {
            return Err(Error::config(format!("forced piece {f:?} missing from vocabulary")));
        }
        let min_lp = pieces.iter().map(|(_, lp)| *lp).fold(0.0, f64::min);
        Ok(TokenizerModel {
            pieces,
            forced,
            lookup,
            max_piece_chars,
            unk_score: min_lp - UNK_PENALTY,
        })
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS as usize + self.pieces.len()
    }

    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn forced(&self) -> &BTreeSet<String> {
        &self.forced
    }

    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        if let Some(i) = SPECIALS.iter().position(|s| *s == piece) {
            return Some(i as u32);
        }
        self.lookup.get(piece).copied()
    }

    pub fn id_to_piece(&self, id: u32) -> Option<&str> {
        if id < NUM_SPECIALS {
            return Some(SPECIALS[id as usize]);
        }
        self.pieces.get((id - NUM_SPECIALS) as usize).map(|(p, _)| p.as_str())
    }

    pub fn log_prob(&self, id: u32) -> Option<f64> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|k| self.pieces.get(k as usize))
            .map(|(_, lp)| *lp)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    fn covers(&self, c: char) -> bool {
        let mut buf = [0u8; 4];
        self.lookup.contains_key(c.encode_utf8(&mut buf) as &str)
    }

    /// Candidate arcs starting at `i`, in ascending length order.
    fn arcs_from(&self, chars: &[char], i: usize, skip_whole: bool, out: &mut Vec<Arc>) {
        out.clear();
        let n = chars.len();
        let mut key = String::new();
        for end in i + 1..=(i + self.max_piece_chars).min(n) {
            key.push(chars[end - 1]);
            if skip_whole && i == 0 && end == n {
                continue;
            }
            if let Some(&id) = self.lookup.get(&key) {
                out.push(Arc {
                    end,
                    id,
                    score: self.pieces[(id - NUM_SPECIALS) as usize].1,
                });
            }
        }
        // Unknown characters: one unk spans a maximal run of uncovered
        // characters, absorbing a directly preceding word marker.
        let run_start = if chars[i] == WORD_MARKER && i + 1 < n && !self.covers(chars[i + 1]) {
            Some(i + 1)
        } else if !self.covers(chars[i]) {
            Some(i)
        } else {
            None
        };
        if let Some(s) = run_start {
            let mut end = s + 1;
            while end < n && !self.covers(chars[end]) {
                end += 1;
            }
            out.push(Arc {
                end,
                id: UNK,
                score: self.unk_score,
            });
        }
    }

    /// Maximum-likelihood segmentation of `chars`. Among equally likely
    /// segmentations the lexicographically first (by piece strings) wins,
    /// which at any position means preferring the shorter piece.
    fn viterbi(&self, chars: &[char], skip_whole: bool) -> Vec<(usize, usize, u32)> {
        let n = chars.len();
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut choice: Vec<Option<Arc>> = vec![None; n + 1];
        best[n] = 0.0;
        let mut arcs = Vec::new();
        for i in (0..n).rev() {
            self.arcs_from(chars, i, skip_whole, &mut arcs);
            for a in &arcs {
                if best[a.end] == f64::NEG_INFINITY {
                    continue;
                }
                let score = a.score + best[a.end];
                let tol = 1e-12 * score.abs().max(1.0);
                if score > best[i] + tol {
                    best[i] = score;
                    choice[i] = Some(*a);
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            match choice[i] {
                Some(a) => {
                    out.push((i, a.end, a.id));
                    i = a.end;
                }
                None => {
                    // unreachable for a well-formed model; fall back to unk
                    out.push((i, n, UNK));
                    i = n;
                }
            }
        }
        out
    }

    pub(crate) fn segment_chars(&self, chars: &[char]) -> Vec<(usize, usize, u32)> {
        self.viterbi(chars, false)
    }

    /// Best segmentation of a piece's own string that does not use the piece.
    pub(crate) fn alternative_segmentation(&self, piece: &str) -> Vec<u32> {
        let chars: Vec<char> = piece.chars().collect();
        self.viterbi(&chars, true).into_iter().map(|(_, _, id)| id).collect()
    }

    /// Token ids of a single word (the word marker is added here).
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = std::iter::once(WORD_MARKER).chain(word.chars()).collect();
        self.viterbi(&chars, false).into_iter().map(|(_, _, id)| id).collect()
    }

    /// Token ids for `text`, without sequence delimiters.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    pub fn encode_pieces(&self, text: &str) -> Vec<String> {
        self.encode(text)
            .into_iter()
            .map(|id| self.id_to_piece(id).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push_str(UNK_SURFACE),
                MASK => s.push_str(SPECIALS[MASK as usize]),
                _ => {
                    if let Some(p) = self.id_to_piece(id) {
                        s.push_str(p);
                    }
                }
            }
        }
        s.replace(WORD_MARKER, " ").trim_start().to_string()
    }

    /// Text form: five special-token header lines, then one
    /// `piece<TAB>log_prob` line per piece (forced pieces carry a third
    /// `forced` column).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in SPECIALS {
            writeln!(out, "{s}\t0").expect("string write");
        }
        for (p, lp) in &self.pieces {
            if self.forced.contains(p) {
                writeln!(out, "{p}\t{lp}\tforced").expect("string write");
            } else {
                writeln!(out, "{p}\t{lp}").expect("string write");
            }
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        for expected in SPECIALS {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(origin, "truncated specials header"))?;
            if line.split('\t').next() != Some(expected) {
                return Err(Error::format(origin, format!("expected special {expected}, got {line:?}")));
            }
        }
        let mut pieces = Vec::new();
        let mut forced = BTreeSet::new();
        for (n, line) in lines.enumerate() {
            let mut cols = line.split('\t');
            let (Some(p), Some(lp)) = (cols.next(), cols.next()) else {
                return Err(Error::format(origin, format!("line {}: expected piece<TAB>log_prob", n + 6)));
            };
            let lp: f64 = lp
                .parse()
                .map_err(|_| Error::format(origin, format!("line {}: bad log-prob {lp:?}", n + 6)))?;
            if cols.next() == Some("forced") {
                forced.insert(p.to_string());
            }
            pieces.push((p.to_string(), lp));
        }
        TokenizerModel::new(pieces, forced)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_text();
        io::write_atomic(path, text.as_bytes())?;
        Ok(io::sha256_hex(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&io::read_string(path)?, path)
    }

    /// Content hash of the serialized model; identifies the tokenizer in
    /// checkpoints.
    pub fn fingerprint(&self) -> String {
        io::sha256_hex(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(pieces: &[(&str, f64)]) -> TokenizerModel {
        TokenizerModel::new(
            pieces.iter().map(|(p, l)| (p.to_string(), *l)).collect(),
            BTreeSet::new(),
        )
        .unwrap()
    }

    fn toy() -> TokenizerModel {
        let q = 0.25f64.ln();
        model(&[
            ("▁", q), ("h", q), ("e", q), ("l", q), ("o", q), ("t", q), ("r", q),
            ("▁hel", -1.0), ("lo", -1.0), ("▁there", -1.0),
        ])
    }

    #[test]
    fn round_trip_and_segmentation() {
        let m = toy();
        assert_eq!(m.encode_pieces("hello there"), vec!["▁hel", "lo", "▁there"]);
        let ids = m.encode("hello there");
        assert_eq!(m.decode(&ids), "hello there");
    }

    #[test]
    fn unseen_characters_become_unk() {
        let m = toy();
        let ids = m.encode("heXlo");
        assert!(ids.contains(&UNK));
        // a lone unseen character absorbs the word marker
        assert_eq!(m.encode("Z"), vec![UNK]);
        assert_eq!(m.encode("ZZ"), vec![UNK]);
    }

    #[test]
    fn ties_pick_lexicographically_first() {
        // ln(1/4) + ln(1/4) == ln(1/16): "a"+"b" ties with "ab"
        let q = 0.25f64.ln();
        let m = model(&[("▁", 0.0), ("a", q), ("b", q), ("ab", 2.0 * q)]);
        assert_eq!(m.encode_pieces("ab"), vec!["▁", "a", "b"]);
        let m = model(&[("▁", 0.0), ("a", q), ("b", q), ("ab", 2.0 * q + 1e-6)]);
        assert_eq!(m.encode_pieces("ab"), vec!["▁", "ab"]);
    }

    #[test]
    fn file_round_trip() {
        let mut m = toy();
        m.forced.insert("lo".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.model");
        let fp = m.save(&path).unwrap();
        let back = TokenizerModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(fp, back.fingerprint());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<pad>\t0\n<unk>\t0\n<s>\t0\n</s>\t0\n<mask>\t0\n"));
        assert!(TokenizerModel::from_text("<pad>\t0\n", &path).is_err());
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(TokenizerModel::new(vec![("a".into(), 0.5)], BTreeSet::new()).is_err());
        assert!(TokenizerModel::new(vec![("a b".into(), -1.0)], BTreeSet::new()).is_err());
        assert!(TokenizerModel::new(vec![("<s>".into(), -1.0)], BTreeSet::new()).is_err());
        assert!(TokenizerModel::new(vec![("a".into(), -1.0)], ["b".to_string()].into()).is_err());
    }
}
