//! Value-swap augmentation: copies of labelled conversations in which every
//! value that occurs verbatim in the text is replaced, consistently across
//! utterances and belief states, by another value observed for the same slot.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Conversation, Turn, Utterance};
use crate::error::Result;
use crate::text::normalize;

/// Slot -> values observed anywhere in the corpus states, plus `extra`
/// values for slots the corpus uses.
fn value_pools(corpus: &[Conversation], extra: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, Vec<String>> {
    let mut pools: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for conv in corpus {
        for turn in &conv.turns {
            for (slot, value) in turn.state.iter() {
                pools.entry(slot.to_string()).or_default().insert(value.to_string());
            }
        }
    }
    for (slot, pool) in pools.iter_mut() {
        let normalized = extra.get(slot).into_iter().flatten().map(|v| normalize(v)).filter(|v| !v.is_empty());
        pool.extend(normalized);
    }
    pools.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == ':' || c == '\''
}

/// Byte ranges of whole-word, case-insensitive occurrences of `needle`.
fn occurrences(text: &str, needle: &str) -> Vec<(usize, usize)> {
    let lower = text.to_lowercase();
    if lower.len() != text.len() || needle.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = lower[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = lower[..start].chars().next_back();
        let after = lower[end..].chars().next();
        if !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char) {
            out.push((start, end));
        }
        from = start + needle.chars().next().map_or(1, char::len_utf8);
    }
    out
}

fn mentioned(conv: &Conversation, value: &str) -> bool {
    conv.turns.iter().any(|t| {
        t.system.iter().chain([&t.user]).any(|u| !occurrences(u.text(), value).is_empty())
    })
}

fn capitalize_words(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut cs = w.chars();
            match cs.next() {
                Some(c) => c.to_uppercase().chain(cs).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Rewrites `text`, longest source values first, never rewriting inside an
/// already substituted span.
fn substitute(text: &str, mapping: &[(String, String)]) -> String {
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    for (from, to) in mapping {
        for (s, e) in occurrences(text, from) {
            if spans.iter().all(|&(a, b, _)| e <= a || s >= b) {
                spans.push((s, e, to));
            }
        }
    }
    spans.sort_by_key(|&(s, _, _)| s);
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for (s, e, to) in spans {
        out.push_str(&text[at..s]);
        let original = &text[s..e];
        if original.starts_with(|c: char| c.is_uppercase()) {
            out.push_str(&capitalize_words(to));
        } else {
            out.push_str(to);
        }
        at = e;
    }
    out.push_str(&text[at..]);
    out
}

fn swap_one(conv: &Conversation, pools: &BTreeMap<String, Vec<String>>, id: String, rng: &mut ChaCha8Rng) -> Result<Conversation> {
    let mut slot_of: BTreeMap<&str, &str> = BTreeMap::new();
    for turn in &conv.turns {
        for (slot, value) in turn.state.iter() {
            slot_of.entry(value).or_insert(slot);
        }
    }
    let mut used: BTreeSet<String> = slot_of.keys().map(|v| v.to_string()).collect();
    let mut mapping: Vec<(String, String)> = Vec::new();
    for (&value, &slot) in &slot_of {
        if !mentioned(conv, value) {
            continue;
        }
        let choices: Vec<&String> = pools[slot]
            .iter()
            .filter(|v| !used.contains(*v) && !mentioned(conv, v))
            .collect();
        if let Some(&new) = choices.choose(rng) {
            used.insert(new.clone());
            mapping.push((value.to_string(), new.clone()));
        }
    }
    mapping.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    let lookup: BTreeMap<&str, &str> = mapping.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let turns = conv
        .turns
        .iter()
        .map(|t| {
            let state = super::BeliefState::from_pairs(
                t.state.iter().map(|(s, v)| (s.to_string(), lookup.get(v).copied().unwrap_or(v).to_string())),
            );
            let system = t.system.as_ref().map(|u| substitute(u.text(), &mapping));
            Ok(Turn {
                system: system.map(|s| Utterance::new(super::Speaker::System, s)).transpose()?,
                user: Utterance::new(super::Speaker::User, substitute(t.user.text(), &mapping))?,
                state,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Conversation {
        id,
        domains: conv.domains.clone(),
        turns,
    })
}

const SUFFIX: &str = "#aug";

/// Id of the conversation an augmented copy was made from.
pub fn augmentation_origin(id: &str) -> &str {
    match id.rsplit_once(SUFFIX) {
        Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => id,
    }
}

/// `copies` value-swapped variants of every conversation, ids suffixed with
/// `#aug<k>`. Values only reachable through paraphrase are left as they are.
/// Replacements come from the corpus states and from `extra_pool`.
pub fn augment_values(
    corpus: &[Conversation],
    copies: usize,
    extra_pool: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Result<Vec<Conversation>> {
    let pools = value_pools(corpus, extra_pool);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len() * copies);
    for k in 0..copies {
        for conv in corpus {
            out.push(swap_one(conv, &pools, format!("{}{SUFFIX}{k}", conv.id), &mut rng)?);
        }
    }
    Ok(out)
}
