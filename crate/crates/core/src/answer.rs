//! Answer normalization, consensus voting and the question/answer type buckets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of free-form answers collected per (question, image).
pub const ANSWERS_PER_QUESTION: usize = 10;

/// Lowercase, trim, and collapse runs of internal whitespace to one space.
///
/// No article stripping and no digit/word unification: "2" and "two" stay distinct.
pub fn normalize_answer(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Most common of exactly ten answers; ties go to the lexicographically smallest.
pub fn consensus_answer<S: AsRef<str>>(answers: &[S]) -> Result<String> {
    if answers.len() != ANSWERS_PER_QUESTION {
        return Err(Error::AnswerCount {
            expected: ANSWERS_PER_QUESTION,
            got: answers.len(),
        });
    }
    Ok(mode(answers.iter().map(AsRef::as_ref)).expect("non-empty"))
}

/// Mode of a sequence of strings with lexicographic tie-break. `None` when empty.
pub fn mode<'a, I: IntoIterator<Item = &'a str>>(items: I) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in items {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in ascending key order, so strict `>` keeps the smallest on ties.
    let mut best: Option<(&str, usize)> = None;
    for (k, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((k, c));
        }
    }
    best.map(|(k, _)| k.to_string())
}

/// Evaluation bucket of a consensus answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "yes/no")]
    YesNo,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "other")]
    Other,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::YesNo => "yes/no",
            AnswerType::Number => "number",
            AnswerType::Other => "other",
        }
    }
}

pub fn answer_type_of(consensus: &str) -> AnswerType {
    match consensus {
        "yes" | "no" => AnswerType::YesNo,
        s if is_numeral(s) => AnswerType::Number,
        _ => AnswerType::Other,
    }
}

/// Base-10 integer or decimal numeral with an optional leading minus sign.
/// Number words ("two") are not numerals.
fn is_numeral(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && digits(int),
        Some(f) => (!int.is_empty() || !f.is_empty()) && digits(int) && digits(f),
    }
}

/// Leading n-gram question categories, longest match wins.
pub const QUESTION_TYPES: &[&str] = &[
    "how many",
    "is the",
    "what",
    "what color is the",
    "what is the",
    "is this",
    "is this a",
    "what is",
    "are the",
    "what kind of",
    "is there a",
    "what type of",
    "is it",
    "what are the",
    "where is the",
    "is there",
    "does the",
    "what color are the",
    "are these",
    "are there",
    "which",
    "is",
    "what is the man",
    "are",
    "how",
    "does this",
    "what is on the",
    "what does the",
    "how many people are",
    "what is in the",
    "what is this",
    "do",
    "what are",
    "are they",
    "what time",
    "what sport is",
    "are there any",
    "is he",
    "what color is",
    "why",
    "where are the",
    "what color",
    "who is",
    "what animal is",
    "is the woman",
    "is this an",
    "do you",
    "how many people are in",
    "what room is",
    "has",
    "is the man",
    "what is the woman",
    "can you",
    "why is the",
    "what is the color of the",
    "what is the person",
    "could",
    "was",
    "is that a",
    "what number is",
    "what is the name",
    "what brand",
];

pub const FALLBACK_QUESTION_TYPE: &str = "other";

/// Longest entry of [`QUESTION_TYPES`] that is a whole-token prefix of `tokens`.
pub fn question_type(tokens: &[String]) -> String {
    let mut best: Option<(&str, usize)> = None;
    for qt in QUESTION_TYPES {
        let n = qt.split(' ').count();
        if n > tokens.len() {
            continue;
        }
        let matches = qt.split(' ').zip(tokens).all(|(a, b)| a == b);
        if matches && best.is_none_or(|(_, bn)| n > bn) {
            best = Some((qt, n));
        }
    }
    best.map_or_else(|| FALLBACK_QUESTION_TYPE.to_string(), |(qt, _)| qt.to_string())
}

/// Lowercase and split a question into word tokens, dropping punctuation.
pub fn tokenize_question(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\'' && c != '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().flat_map(char::to_lowercase).collect())
        .collect()
}
