//! Word-level tokenizer.
//!
//! Text is segmented into runs of letters/digits, single CJK codepoints and
//! single punctuation marks; whitespace only separates. Decoding joins tokens
//! with canonical spacing, so `decode(encode(t)) == normalize(t)` whenever
//! every token of `t` is in the vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{io_at, Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

const SPECIAL_NAMES: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // ext A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // ext B onward
}

/// Split text into tokens.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let word_char = c.is_alphanumeric() && !is_cjk(c);
        if word_char {
            run_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = run_start.take() {
            out.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = run_start {
        out.push(&text[s..]);
    }
    out
}

/// Word tokens only: alphanumeric runs and CJK codepoints, punctuation dropped.
pub fn words(text: &str) -> Vec<&str> {
    segment(text)
        .into_iter()
        .filter(|t| t.chars().all(|c| c.is_alphanumeric()))
        .collect()
}

fn is_digits(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_digit())
}

fn single(t: &str) -> Option<char> {
    let mut it = t.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Join tokens with canonical spacing.
pub fn join<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if i > 0 && needs_space(tokens, i) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

fn needs_space<S: AsRef<str>>(tokens: &[S], i: usize) -> bool {
    let left = tokens[i - 1].as_ref();
    let right = tokens[i].as_ref();
    let l = single(left);
    let r = single(right);
    if l.is_some_and(is_cjk) || r.is_some_and(is_cjk) {
        return false;
    }
    if l.is_some_and(|c| !c.is_ascii() && !c.is_alphanumeric())
        || r.is_some_and(|c| !c.is_ascii() && !c.is_alphanumeric())
    {
        return false;
    }
    if r.is_some_and(|c| ".,;:!?%)]}".contains(c)) {
        return false;
    }
    if l.is_some_and(|c| "([{-/".contains(c)) || r.is_some_and(|c| "-/".contains(c)) {
        return false;
    }
    // decimal point or thousands separator: "0 . 7" -> "0.7"
    if matches!(l, Some('.') | Some(',')) && is_digits(right) && i >= 2 && is_digits(tokens[i - 2].as_ref()) {
        return false;
    }
    true
}

/// Canonical form of `text` under the tokenizer's spacing rules.
pub fn normalize(text: &str) -> String {
    join(&segment(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keep the `max_vocab` most frequent tokens, ties broken
    /// lexicographically. Specials occupy ids 0..4 in addition.
    pub fn build<S: AsRef<str>>(texts: &[S], max_vocab: usize) -> Result<Self> {
        if max_vocab < 8 {
            return Err(Error::Vocab(format!("max_vocab must be >= 8, got {max_vocab}")));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for tok in segment(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_vocab);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect()))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + NUM_SPECIAL))
            .collect();
        Self { tokens, index }
    }

    /// Total ids including specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIAL as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        if id < NUM_SPECIAL {
            return Ok(SPECIAL_NAMES[id as usize]);
        }
        self.tokens
            .get((id - NUM_SPECIAL) as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of range (vocabulary size {})", self.len())))
    }

    /// Corpus tokens in id order (excluding specials).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        segment(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Decode ids to text. `bos`, `eos` and `pad` produce nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut toks = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                BOS | EOS | PAD => self.token(id).map(|_| ())?,
                _ => toks.push(self.token(id)?),
            }
        }
        Ok(join(&toks))
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(io_at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || !seen.insert(t.as_str()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("empty or duplicate vocabulary entry {t:?}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
