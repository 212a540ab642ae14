//! Dialogue corpora: loading, history construction, instance flattening,
//! few-shot sampling and synthetic generation.

mod augment;
mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::normalize;

pub use augment::{augment_values, augmentation_origin};
pub use synth::{builtin_ontology, synth_corpus, Ontology, SlotTemplate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::System => "[system]",
            Speaker::User => "[user]",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    speaker: Speaker,
    text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} utterance text is empty",
                speaker.tag()
            )));
        }
        Ok(Utterance { speaker, text })
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    /// Raw text as stored in the corpus file.
    pub fn text(&self) -> &str {
        &self.text
    }
}

/// A set of (slot, value) pairs, kept in canonical (normalized, sorted) form.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BeliefState {
    pairs: BTreeSet<(String, String)>,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, V)>,
        S: AsRef<str>,
        V: AsRef<str>,
    {
        let mut state = BeliefState::new();
        for (s, v) in pairs {
            state.insert(s.as_ref(), v.as_ref());
        }
        state
    }

    /// Inserts a normalized pair; returns false for duplicates or empty strings.
    pub fn insert(&mut self, slot: &str, value: &str) -> bool {
        let (slot, value) = (normalize(slot), normalize(value));
        if slot.is_empty() || value.is_empty() {
            return false;
        }
        self.pairs.insert((slot, value))
    }

    pub fn remove_slot(&mut self, slot: &str) {
        let slot = normalize(slot);
        self.pairs.retain(|(s, _)| *s != slot);
    }

    pub fn contains(&self, slot: &str, value: &str) -> bool {
        self.pairs.contains(&(normalize(slot), normalize(value)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(s, v)| (s.as_str(), v.as_str()))
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, v)| v.as_str())
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(s, _)| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl fmt::Display for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(s, v)| format!("{s} = {v}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub system: Option<Utterance>,
    pub user: Utterance,
    /// Cumulative gold state at this turn.
    pub state: BeliefState,
}

impl Turn {
    pub fn new(system: Option<&str>, user: &str, state: BeliefState) -> Result<Self> {
        Ok(Turn {
            system: system.map(|s| Utterance::new(Speaker::System, s)).transpose()?,
            user: Utterance::new(Speaker::User, user)?,
            state,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
}

/// One training/test unit: a single gold (slot, value) pair with its history.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instance {
    pub history: String,
    pub slot: String,
    pub value: String,
    pub conversation_id: String,
    pub turn_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub ratio: f64,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize)]
struct FileCorpus<'a> {
    conversations: Vec<FileConversation<'a>>,
}

#[derive(Serialize)]
struct FileConversation<'a> {
    id: &'a str,
    domains: &'a [String],
    turns: Vec<FileTurn<'a>>,
}

#[derive(Serialize)]
struct FileTurn<'a> {
    system: Option<&'a str>,
    user: &'a str,
    state: Vec<[&'a str; 2]>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

/// Parses a dialogue JSON document, normalizing belief-state strings.
pub fn parse_corpus(text: &str) -> Result<Vec<Conversation>> {
    let root: Value = serde_json::from_str(text)?;
    let convs = root
        .get("conversations")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema {
            conversation: "<root>".into(),
            detail: "missing top-level `conversations` array".into(),
        })?;

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(convs.len());
    for (ci, conv) in convs.iter().enumerate() {
        let id = conv
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Schema {
                conversation: format!("#{ci}"),
                detail: "missing string field `id`".into(),
            })?
            .to_string();
        let schema = |detail: String| Error::Schema {
            conversation: id.clone(),
            detail,
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let domains = match conv.get("domains") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|d| {
                    d.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| schema("`domains` must contain strings".into()))
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(schema("`domains` must be an array".into())),
        };
        let turns_json = conv
            .get("turns")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("missing `turns` array".into()))?;
        if turns_json.is_empty() {
            return Err(schema("conversation has no turns".into()));
        }
        let mut turns = Vec::with_capacity(turns_json.len());
        for (ti, turn) in turns_json.iter().enumerate() {
            let system = match turn.get("system") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) if s.trim().is_empty() => None,
                Some(Value::String(s)) => Some(s.as_str()),
                Some(_) => return Err(schema(format!("turn {ti}: `system` must be a string or null"))),
            };
            let user = match turn.get("user") {
                Some(Value::String(s)) if !s.trim().is_empty() => s.as_str(),
                Some(Value::String(_)) => return Err(schema(format!("turn {ti}: `user` is empty"))),
                Some(_) => return Err(schema(format!("turn {ti}: `user` must be a string"))),
                None => return Err(schema(format!("turn {ti}: missing field `user`"))),
            };
            let mut state = BeliefState::new();
            match turn.get("state") {
                None | Some(Value::Null) => {}
                Some(Value::Array(pairs)) => {
                    for (pi, pair) in pairs.iter().enumerate() {
                        let pair = pair.as_array().filter(|p| p.len() == 2);
                        let (s, v) = match pair.map(|p| (p[0].as_str(), p[1].as_str())) {
                            Some((Some(s), Some(v))) => (s, v),
                            _ => {
                                return Err(schema(format!(
                                    "turn {ti}: state entry {pi} must be a [slot, value] string pair"
                                )))
                            }
                        };
                        if normalize(s).is_empty() || normalize(v).is_empty() {
                            return Err(schema(format!("turn {ti}: state entry {pi} has an empty slot or value")));
                        }
                        state.insert(s, v);
                    }
                }
                Some(_) => return Err(schema(format!("turn {ti}: `state` must be an array"))),
            }
            turns.push(Turn::new(system, user, state).map_err(|e| schema(format!("turn {ti}: {e}")))?);
        }
        out.push(Conversation { id, domains, turns });
    }
    Ok(out)
}

pub fn corpus_to_json(corpus: &[Conversation]) -> String {
    let file = FileCorpus {
        conversations: corpus
            .iter()
            .map(|c| FileConversation {
                id: &c.id,
                domains: &c.domains,
                turns: c
                    .turns
                    .iter()
                    .map(|t| FileTurn {
                        system: t.system.as_ref().map(Utterance::text),
                        user: t.user.text(),
                        state: t.state.iter().map(|(s, v)| [s, v]).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
    s.push('\n');
    s
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_json(corpus)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// History

fn history_utterances(conv: &Conversation, t: usize) -> Result<Vec<&Utterance>> {
    if t >= conv.turns.len() {
        return Err(Error::TurnOutOfRange {
            index: t,
            len: conv.turns.len(),
        });
    }
    let mut utts = Vec::new();
    for turn in &conv.turns[..=t] {
        if let Some(sys) = &turn.system {
            utts.push(sys);
        }
        utts.push(&turn.user);
    }
    Ok(utts)
}

fn join_with_budget(pieces: Vec<String>, budget: Option<usize>) -> String {
    let Some(budget) = budget else {
        return pieces.join(" ");
    };
    let lens: Vec<usize> = pieces.iter().map(|p| p.split_whitespace().count()).collect();
    let mut start = pieces.len();
    let mut total = 0;
    while start > 0 && total + lens[start - 1] <= budget {
        total += lens[start - 1];
        start -= 1;
    }
    if start == pieces.len() {
        // The final utterance alone exceeds the budget: keep its trailing words.
        let last = pieces.last().map(String::as_str).unwrap_or("");
        let words: Vec<&str> = last.split_whitespace().collect();
        return words[words.len().saturating_sub(budget)..].join(" ");
    }
    pieces[start..].join(" ")
}

/// Normalized, speaker-tagged history up to and including the user utterance
/// of turn `t`. With a budget, whole utterances are dropped from the left
/// until at most `budget` whitespace tokens remain.
pub fn dialogue_history(conv: &Conversation, t: usize, budget: Option<usize>) -> Result<String> {
    let pieces = history_utterances(conv, t)?
        .into_iter()
        .map(|u| format!("{} {}", u.speaker().tag(), normalize(u.text())))
        .collect();
    Ok(join_with_budget(pieces, budget))
}

/// Same as [`dialogue_history`] but keeps the original casing and spacing of
/// each utterance (used by the rule-based value extractor).
pub fn raw_dialogue_history(conv: &Conversation, t: usize, budget: Option<usize>) -> Result<String> {
    let pieces = history_utterances(conv, t)?
        .into_iter()
        .map(|u| format!("{} {}", u.speaker().tag(), u.text().trim()))
        .collect();
    Ok(join_with_budget(pieces, budget))
}

/// One instance per gold (slot, value) pair per turn.
pub fn make_instances(corpus: &[Conversation], budget: Option<usize>) -> Vec<Instance> {
    let mut out = Vec::new();
    for conv in corpus {
        for (t, turn) in conv.turns.iter().enumerate() {
            if turn.state.is_empty() {
                continue;
            }
            let history = dialogue_history(conv, t, budget).expect("turn index in range");
            for (slot, value) in turn.state.iter() {
                out.push(Instance {
                    history: history.clone(),
                    slot: slot.to_string(),
                    value: value.to_string(),
                    conversation_id: conv.id.clone(),
                    turn_index: t,
                });
            }
        }
    }
    out
}

/// Deterministic conversation-level subset of size ceil(ratio * n), in corpus order.
pub fn sample_few_shot(corpus: &[Conversation], cfg: &FewShotConfig) -> Result<Vec<Conversation>> {
    if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "few-shot ratio must be in (0, 1], got {}",
            cfg.ratio
        )));
    }
    let n = corpus.len();
    let k = ((cfg.ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(n);
    if k == n {
        return Ok(corpus.to_vec());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    idx.shuffle(&mut rng);
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| corpus[i].clone()).collect())
}

/// Fraction of gold (turn, pair) values that occur verbatim in the turn's history.
pub fn value_match_rate(corpus: &[Conversation]) -> Result<f64> {
    let mut total = 0usize;
    let mut matched = 0usize;
    for conv in corpus {
        for (t, turn) in conv.turns.iter().enumerate() {
            if turn.state.is_empty() {
                continue;
            }
            let history = dialogue_history(conv, t, None)?;
            for value in turn.state.values() {
                total += 1;
                if history.contains(value) {
                    matched += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("corpus has no (slot, value) pairs".into()));
    }
    Ok(matched as f64 / total as f64)
}

/// Removes every pair with the given slot from all belief states.
pub fn strip_slot(corpus: &[Conversation], slot: &str) -> Vec<Conversation> {
    corpus
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for turn in &mut c.turns {
                turn.state.remove_slot(slot);
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(system, user, state pairs)`.
    type TurnSpec<'a> = (Option<&'a str>, &'a str, &'a [(&'a str, &'a str)]);

    fn conv(id: &str, turns: &[TurnSpec]) -> Conversation {
        Conversation {
            id: id.into(),
            domains: vec![],
            turns: turns
                .iter()
                .map(|(s, u, st)| Turn::new(*s, u, BeliefState::from_pairs(st.iter().copied())).unwrap())
                .collect(),
        }
    }

    #[test]
    fn load_minimal_file() {
        let text = r#"{"conversations": [{"id": "a", "domains": ["train"],
            "turns": [{"system": null, "user": "to London", "state": [["Destination", " London "]]}]}]}"#;
        let corpus = parse_corpus(text).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus[0].turns[0].state.len(), 1);
        assert!(corpus[0].turns[0].state.contains("destination", "london"));
    }

    #[test]
    fn load_empty_corpus() {
        assert!(parse_corpus(r#"{"conversations": []}"#).unwrap().is_empty());
    }

    #[test]
    fn missing_user_names_turn() {
        let text = r#"{"conversations": [{"id": "c7", "domains": [],
            "turns": [{"system": null, "user": "hi", "state": []}, {"system": "ok", "state": []}]}]}"#;
        let err = parse_corpus(text).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Schema { .. }));
        assert!(msg.contains("c7") && msg.contains("turn 1") && msg.contains("user"), "{msg}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = r#"{"conversations": [
            {"id": "x", "turns": [{"user": "a", "state": []}]},
            {"id": "x", "turns": [{"user": "b", "state": []}]}]}"#;
        assert!(matches!(parse_corpus(text), Err(Error::DuplicateId(id)) if id == "x"));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_corpus("/nonexistent/corpus.json"), Err(Error::Io { .. })));
    }

    #[test]
    fn history_single_and_ordering() {
        let c = conv("a", &[(None, "i need a taxi", &[])]);
        assert_eq!(dialogue_history(&c, 0, None).unwrap(), "[user] i need a taxi");
        let c = conv("b", &[(None, "u1", &[]), (Some("a2"), "u2", &[])]);
        assert_eq!(dialogue_history(&c, 1, None).unwrap(), "[user] u1 [system] a2 [user] u2");
        assert!(matches!(dialogue_history(&c, 2, None), Err(Error::TurnOutOfRange { .. })));
    }

    #[test]
    fn history_left_truncation_keeps_suffix() {
        let c = conv(
            "a",
            &[
                (None, "one two three four", &[]),
                (Some("five six"), "seven eight nine", &[]),
            ],
        );
        let full = dialogue_history(&c, 1, None).unwrap();
        // 5 + 3 + 4 tokens; budget 8 drops the first utterance only.
        let cut = dialogue_history(&c, 1, Some(8)).unwrap();
        assert_eq!(cut, "[system] five six [user] seven eight nine");
        assert!(full.ends_with(&cut));
        let cut = dialogue_history(&c, 1, Some(4)).unwrap();
        assert_eq!(cut, "[user] seven eight nine");
        let cut = dialogue_history(&c, 1, Some(2)).unwrap();
        assert_eq!(cut, "eight nine");
        assert!(full.ends_with(&cut));
    }

    #[test]
    fn instances_counting() {
        let c = conv(
            "a",
            &[
                (None, "x", &[("destination", "london")]),
                (Some("s"), "y", &[]),
                (Some("s"), "z", &[("destination", "london"), ("day", "tuesday")]),
            ],
        );
        let inst = make_instances(&[c], None);
        assert_eq!(inst.len(), 3);
        assert_eq!(inst[1].history, inst[2].history);
        assert_eq!(inst[1].turn_index, 2);
    }

    #[test]
    fn few_shot_sampling() {
        let corpus: Vec<Conversation> = (0..100)
            .map(|i| conv(&format!("c{i}"), &[(None, "hi", &[])]))
            .collect();
        let all = sample_few_shot(&corpus, &FewShotConfig { ratio: 1.0, seed: 3 }).unwrap();
        assert_eq!(all, corpus);
        let one = sample_few_shot(&corpus, &FewShotConfig { ratio: 0.01, seed: 3 }).unwrap();
        assert_eq!(one.len(), 1);
        let a = sample_few_shot(&corpus, &FewShotConfig { ratio: 0.07, seed: 9 }).unwrap();
        let b = sample_few_shot(&corpus, &FewShotConfig { ratio: 0.07, seed: 9 }).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(a, b);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(sample_few_shot(&corpus, &FewShotConfig { ratio: bad, seed: 0 }).is_err());
        }
    }

    #[test]
    fn match_rate_cases() {
        let c = conv("a", &[(None, "to london", &[("destination", "london")])]);
        assert_eq!(value_match_rate(&[c]).unwrap(), 1.0);
        let c = conv("a", &[(None, "with free wifi", &[("internet", "yes")])]);
        assert_eq!(value_match_rate(&[c]).unwrap(), 0.0);
        let c = conv("a", &[(None, "hello", &[])]);
        assert!(value_match_rate(&[c]).is_err());

        // 10 pairs across turns, 9 matchable (cumulative states count per turn).
        let c1 = conv(
            "a",
            &[
                (None, "to paris on monday", &[("destination", "paris"), ("day", "monday")]),
                (
                    Some("ok"),
                    "for 3 people with free wifi",
                    &[("destination", "paris"), ("day", "monday"), ("people", "3"), ("internet", "yes")],
                ),
            ],
        );
        let c2 = conv(
            "b",
            &[(None, "cheap food in the north", &[("price", "cheap"), ("area", "north")])],
        );
        let c3 = conv("c", &[(None, "at 17:00 on friday", &[("leave", "17:00"), ("day", "friday")])]);
        assert!((value_match_rate(&[c1, c2, c3]).unwrap() - 0.9).abs() < 1e-12);
    }
}
