use std::sync::LazyLock;

use regex::Regex;

use crate::text::normalize;

/// Price ranges, areas and cuisines, in the style of restaurant/hotel ontologies.
pub const DEFAULT_ADJECTIVES: &[&str] = &[
    "cheap", "moderate", "expensive", "north", "south", "east", "west", "centre", "free", "indian", "chinese",
    "italian", "british", "european", "thai", "french", "spanish", "mexican", "japanese", "korean", "greek",
    "turkish", "lebanese", "vietnamese", "portuguese", "modern", "international", "asian",
];

const DATE_WORDS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "today", "tomorrow", "tonight",
    "weekend",
];

static TIME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d{1,2}:\d{2}\b").expect("valid regex"));
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d+\b").expect("valid regex"));
static CAPITALIZED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[A-Z][a-z]+(?:\s+[A-Z][a-z]+)*\b").expect("valid regex"));
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]+").expect("valid regex"));

/// Deterministic pattern-based value extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleExtractor {
    pub adjectives: Vec<String>,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        RuleExtractor {
            adjectives: DEFAULT_ADJECTIVES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RuleExtractor {
    /// Clock times, numbers, weekday words, capitalized spans and lexicon
    /// adjectives, in order of first appearance and without duplicates.
    pub fn extract(&self, text: &str) -> Vec<String> {
        let mut found: Vec<(usize, String)> = Vec::new();
        let mut taken = vec![false; text.len()];
        for m in TIME.find_iter(text) {
            taken[m.range()].iter_mut().for_each(|t| *t = true);
            found.push((m.start(), m.as_str().to_string()));
        }
        for m in NUMBER.find_iter(text) {
            if !taken[m.start()] {
                found.push((m.start(), m.as_str().to_string()));
            }
        }
        for m in CAPITALIZED.find_iter(text) {
            if m.as_str() != "I" {
                found.push((m.start(), normalize(m.as_str())));
            }
        }
        for m in WORD.find_iter(text) {
            let w = m.as_str().to_lowercase();
            if DATE_WORDS.contains(&w.as_str()) || self.adjectives.contains(&w) {
                found.push((m.start(), w));
            }
        }
        found.sort_by_key(|(pos, _)| *pos);
        let mut out: Vec<String> = Vec::new();
        for (_, v) in found {
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }
}

pub fn rule_candidates(history: &str) -> Vec<String> {
    RuleExtractor::default().extract(history)
}
