//! Word-piece tokenizer with a character fallback.
//!
//! Text is split into runs: Latin-letter words, CJK runs, single digits and
//! single other characters (spaces and punctuation are their own tokens).
//! Letter runs are segmented by greedy longest match against the piece
//! vocabulary and fall back to single characters. Decoding concatenates
//! pieces, so `decode(encode(t)) == t` whenever every character of `t` is in
//! the vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Latin,
    Cjk,
    Single,
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF)
}

fn class(c: char) -> Class {
    if is_cjk(c) {
        Class::Cjk
    } else if c.is_alphabetic() {
        Class::Latin
    } else {
        Class::Single
    }
}

/// Splits `text` into pre-tokenization runs.
fn runs(text: &str) -> Vec<(&str, Class)> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut current: Option<Class> = None;
    for (i, c) in text.char_indices() {
        let k = class(c);
        match current {
            Some(prev) if prev == k && k != Class::Single => {}
            Some(prev) => {
                out.push((&text[start..i], prev));
                start = i;
                current = Some(k);
            }
            None => current = Some(k),
        }
    }
    if let Some(k) = current {
        out.push((&text[start..], k));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    pieces: Vec<String>,
    lookup: HashMap<String, u32>,
    max_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    pieces: Vec<String>,
}

impl From<TokenizerFile> for Tokenizer {
    fn from(f: TokenizerFile) -> Self {
        Self::from_pieces(f.pieces)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        TokenizerFile { pieces: t.pieces }
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces
    }
}

impl Tokenizer {
    /// Builds a vocabulary covering `texts`.
    ///
    /// Every character becomes a piece, every letter run becomes a whole-word
    /// piece, except words listed in `split_words`, which enter the vocabulary
    /// as two halves so they always encode to at least two tokens. Other
    /// multi-character pieces (e.g. names) can be forced in via `extra`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        split_words: &BTreeSet<String>,
        extra: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut chars = BTreeSet::new();
        let mut words = BTreeSet::new();
        for t in texts {
            for (run, k) in runs(t) {
                chars.extend(run.chars().map(String::from));
                if k == Class::Latin && run.chars().count() > 1 && !split_words.contains(run) {
                    words.insert(run.to_string());
                }
            }
        }
        for w in split_words {
            let n = w.chars().count();
            if n < 2 {
                continue;
            }
            let cut = w.char_indices().nth(n.div_ceil(2)).map_or(w.len(), |(i, _)| i);
            for half in [&w[..cut], &w[cut..]] {
                if half.chars().count() > 1 {
                    words.insert(half.to_string());
                }
            }
            chars.extend(w.chars().map(String::from));
        }
        words.extend(extra.into_iter().filter(|w| !split_words.contains(w)));
        let mut pieces = vec![UNK.to_string()];
        pieces.extend(chars);
        pieces.extend(words.into_iter().filter(|w| w.chars().count() > 1));
        Self::from_pieces(pieces)
    }

    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let mut lookup = HashMap::with_capacity(pieces.len());
        let mut max_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            lookup.entry(p.clone()).or_insert(i as u32);
            max_chars = max_chars.max(p.chars().count());
        }
        Self {
            pieces,
            lookup,
            max_chars,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.lookup.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for (run, k) in runs(text) {
            if k == Class::Single {
                out.push(self.id(run).unwrap_or(0));
                continue;
            }
            let bounds: Vec<usize> = run
                .char_indices()
                .map(|(i, _)| i)
                .chain(std::iter::once(run.len()))
                .collect();
            let n = bounds.len() - 1;
            let mut i = 0;
            while i < n {
                let mut matched = None;
                for len in (1..=self.max_chars.min(n - i)).rev() {
                    if let Some(id) = self.id(&run[bounds[i]..bounds[i + len]]) {
                        matched = Some((id, len));
                        break;
                    }
                }
                let (id, len) = matched.unwrap_or((0, 1));
                out.push(id);
                i += len;
            }
        }
        out
    }

    /// Like [`encode`](Self::encode) but refuses text outside the vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        let ids = self.encode(text);
        if ids.contains(&0) {
            return Err(Error::Corpus(format!("text not covered by vocabulary: {text:?}")));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.piece(i).unwrap_or(UNK))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn runs_split_by_script() {
        let r: Vec<&str> = runs("Hiroko Sasaki的职业是摄像师。098-12").into_iter().map(|x| x.0).collect();
        assert_eq!(
            r,
            vec!["Hiroko", " ", "Sasaki", "的职业是摄像师", "。", "0", "9", "8", "-", "1", "2"]
        );
    }

    #[test]
    fn split_words_encode_to_two_tokens() {
        let tok = Tokenizer::build(
            ["The job of Hiroko Sasaki is videographer."],
            &split(&["videographer"]),
            [],
        );
        let e = tok.encode("videographer");
        assert_eq!(e.len(), 2);
        assert_eq!(tok.decode(&e), "videographer");
        assert_eq!(tok.encode("Sasaki").len(), 1);
    }

    #[test]
    fn cjk_falls_back_to_characters() {
        let text = "<name>的职业是摄像师。".replace("<name>", "Hiroko Sasaki");
        let tok = Tokenizer::build([text.as_str()], &split(&["摄像师"]), []);
        let ids = tok.encode(&text);
        assert_eq!(tok.decode(&ids), text);
        assert_eq!(tok.encode("摄像师").len(), 2);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let tok = Tokenizer::build(["abc"], &BTreeSet::new(), []);
        assert_eq!(tok.encode("abz"), vec![tok.id("a").unwrap(), tok.id("b").unwrap(), 0]);
        assert!(tok.encode_strict("z").is_err());
    }

    #[test]
    fn serde_round_trip() {
        let tok = Tokenizer::build(["hello world 42"], &BTreeSet::new(), []);
        let s = serde_json::to_string(&tok).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.encode("hello"), tok.encode("hello"));
    }
}
