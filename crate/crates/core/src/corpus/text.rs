//! Subtitle text handling: normalisation, a small rule-based lemmatiser and
//! vocabulary matching.
//!
//! Lemmatiser rule table (applied one rule at a time until no rule fires,
//! which makes the result a fixed point):
//!
//! | suffix | condition | rewrite |
//! |---|---|---|
//! | `ies` | length > 4 | `y` |
//! | `ches` `shes` `sses` `xes` `zes` | length > 3 | drop `es` |
//! | `s` | length > 3, not `ss` `us` `is` | drop `s` |
//! | `ing` | stem ≥ 3 letters with a vowel | drop, undo doubled final consonant |
//! | `ed` | not `eed`, stem ≥ 3 letters with a vowel | drop, undo doubled final consonant |
//!
//! Doubled `l`, `s`, `z` and `f` are kept (`calling` → `call`). Only purely
//! alphabetic single tokens are lemmatised; phrases pass through.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A lowercase vocabulary token (or space-separated phrase).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Word(String);

impl Word {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::InvalidInput("empty word".into()));
        }
        if text.trim() != text {
            return Err(Error::InvalidInput(format!(
                "word `{text}` has leading or trailing whitespace"
            )));
        }
        if text.chars().any(char::is_uppercase) {
            return Err(Error::InvalidInput(format!(
                "word `{text}` contains uppercase characters"
            )));
        }
        Ok(Word(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_phrase(&self) -> bool {
        self.0.contains(char::is_whitespace)
    }
}

impl TryFrom<String> for Word {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Word::new(value)
    }
}

impl From<Word> for String {
    fn from(w: Word) -> String {
        w.0
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Word {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// Spells out 0..=999 as space-separated words ("one hundred twenty three").
pub fn spell_number(n: u32) -> Option<Vec<&'static str>> {
    if n > 999 {
        return None;
    }
    let mut out = Vec::new();
    let hundreds = n / 100;
    let rest = n % 100;
    if hundreds > 0 {
        out.push(ONES[hundreds as usize]);
        out.push("hundred");
        if rest == 0 {
            return Some(out);
        }
    }
    if rest < 20 {
        out.push(ONES[rest as usize]);
    } else {
        out.push(TENS[(rest / 10) as usize]);
        if rest % 10 != 0 {
            out.push(ONES[(rest % 10) as usize]);
        }
    }
    Some(out)
}

fn strip_thousands_commas(tok: &str) -> Option<String> {
    let groups: Vec<&str> = tok.split(',').collect();
    if groups.len() < 2 {
        return None;
    }
    let ok = groups[0].len() <= 3
        && !groups[0].is_empty()
        && groups.iter().all(|g| g.chars().all(|c| c.is_ascii_digit()))
        && groups[1..].iter().all(|g| g.len() == 3);
    ok.then(|| groups.concat())
}

/// Lowercases, strips punctuation (possessive `'s` is dropped), spells out
/// standalone integers 0..=999 and splits on whitespace.
pub fn normalize_text(raw: &str) -> Vec<Word> {
    let mut out = Vec::new();
    for token in raw.split_whitespace() {
        let lower = token.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
        let trimmed = lower.trim_matches(|c: char| !(c.is_alphanumeric() || c == '\''));
        let trimmed = trimmed.trim_matches('\'');
        let base = trimmed.strip_suffix("'s").unwrap_or(trimmed);
        let base = strip_thousands_commas(base).unwrap_or_else(|| base.to_string());
        let cleaned: String = base
            .chars()
            .filter(|&c| c != '\'')
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect();
        for piece in cleaned.split_whitespace() {
            let spelled = if piece.chars().all(|c| c.is_ascii_digit()) {
                piece.parse::<u32>().ok().and_then(spell_number)
            } else {
                None
            };
            match spelled {
                Some(words) => out.extend(words.into_iter().map(|w| Word(w.to_string()))),
                None => out.push(Word(piece.to_string())),
            }
        }
    }
    out
}

fn has_vowel(s: &str) -> bool {
    s.chars().any(|c| "aeiouy".contains(c))
}

fn undouble(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] {
        let c = b[n - 1] as char;
        if !"aeiouylszf".contains(c) {
            return stem[..n - 1].to_string();
        }
    }
    stem.to_string()
}

fn lemma_step(w: &str) -> Option<String> {
    if !w.chars().all(|c| c.is_ascii_lowercase()) {
        return None;
    }
    let n = w.len();
    if n > 4 && w.ends_with("ies") {
        return Some(format!("{}y", &w[..n - 3]));
    }
    if n > 3 && ["ches", "shes", "sses", "xes", "zes"].iter().any(|s| w.ends_with(s)) {
        return Some(w[..n - 2].to_string());
    }
    if n > 3 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
        return Some(w[..n - 1].to_string());
    }
    if let Some(stem) = w.strip_suffix("ing") {
        if stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    if let Some(stem) = w.strip_suffix("ed") {
        if !w.ends_with("eed") && stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    None
}

/// Rule-based lemma; idempotent by construction (iterates to a fixed point).
pub fn lemmatize(word: &Word) -> Word {
    let mut cur = word.0.clone();
    while let Some(next) = lemma_step(&cur) {
        cur = next;
    }
    Word(cur)
}

/// The space-joined normalised form of a word or phrase.
pub fn normalized_form(text: &str) -> String {
    normalize_text(text)
        .iter()
        .map(Word::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Precomputed forms of one subtitle, reusable across many vocabulary queries.
#[derive(Debug, Clone)]
pub struct SubtitleForms {
    single: BTreeSet<String>,
    normalized: Vec<String>,
    lemmas: Vec<String>,
}

impl SubtitleForms {
    pub fn new(subtitle: &str) -> Self {
        let mut single = BTreeSet::new();
        for tok in subtitle.split_whitespace() {
            let lower = tok.to_lowercase();
            let trimmed = lower
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string();
            if !trimmed.is_empty() {
                single.insert(trimmed);
            }
            single.insert(lower);
        }
        let normalized: Vec<String> = normalize_text(subtitle)
            .into_iter()
            .map(String::from)
            .collect();
        let lemmas: Vec<String> = normalized
            .iter()
            .map(|t| lemmatize(&Word(t.clone())).0)
            .collect();
        single.extend(normalized.iter().cloned());
        single.extend(lemmas.iter().cloned());
        Self {
            single,
            normalized,
            lemmas,
        }
    }

    fn has_run(&self, parts: &[&str]) -> bool {
        if parts.is_empty() || parts.len() > self.normalized.len() {
            return false;
        }
        (0..=self.normalized.len() - parts.len()).any(|start| {
            parts.iter().enumerate().all(|(k, p)| {
                self.normalized[start + k] == *p || self.lemmas[start + k] == *p
            })
        })
    }

    /// Whether any form of `word` (original or normalised) matches any form of
    /// the subtitle (original, normalised or lemmatised tokens).
    pub fn matches(&self, word: &Word) -> bool {
        let original = word.as_str().to_string();
        let normalized = normalized_form(word.as_str());
        [original, normalized].iter().any(|form| {
            if form.is_empty() {
                return false;
            }
            if form.contains(' ') {
                let parts: Vec<&str> = form.split(' ').collect();
                self.has_run(&parts)
            } else {
                self.single.contains(form)
            }
        })
    }
}

/// Vocabulary words present in a subtitle.
pub fn tokenize<'a, I>(subtitle: &str, vocab: I) -> BTreeSet<Word>
where
    I: IntoIterator<Item = &'a Word>,
{
    let forms = SubtitleForms::new(subtitle);
    vocab
        .into_iter()
        .filter(|w| forms.matches(w))
        .cloned()
        .collect()
}
