//! Template-driven synthetic dialogue generator over a slot ontology.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BeliefState, Conversation, Turn};
use crate::error::{Error, Result};
use crate::text::normalize;

const BUILTIN: &str = include_str!("../../data/ontology.json");

/// Utterance patterns for one slot. `slot = "*"` patterns apply to every slot
/// and may reference the slot's name through `{slot}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotTemplate {
    pub slot: String,
    pub patterns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub slots: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_match_fraction")]
    pub match_fraction: f64,
    pub templates: Vec<SlotTemplate>,
    /// Implicit surface forms per value; a value without aliases is always explicit.
    #[serde(default)]
    pub aliases: BTreeMap<String, Vec<String>>,
    /// Slots whose values are title-cased when written into utterances.
    #[serde(default)]
    pub capitalized: Vec<String>,
    #[serde(default)]
    pub domains: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub openers: Vec<String>,
    #[serde(default = "default_system")]
    pub system_utterances: Vec<String>,
    #[serde(default = "default_closing")]
    pub closing: String,
    #[serde(default = "default_turns")]
    pub turns: [usize; 2],
    #[serde(default = "default_mentions")]
    pub mentions_per_turn: [usize; 2],
}

fn default_match_fraction() -> f64 {
    0.9
}
fn default_system() -> Vec<String> {
    vec!["okay , anything else ?".into()]
}
fn default_closing() -> String {
    "that is all , thanks .".into()
}
fn default_turns() -> [usize; 2] {
    [1, 4]
}
fn default_mentions() -> [usize; 2] {
    [1, 2]
}

/// The ontology used by the benchmark: 8 slots with 16 values each.
pub fn builtin_ontology() -> Ontology {
    serde_json::from_str(BUILTIN).expect("builtin ontology parses")
}

impl Ontology {
    pub fn from_json(text: &str) -> Result<Self> {
        let o: Ontology = serde_json::from_str(text).map_err(|e| Error::Ontology(e.to_string()))?;
        o.validate()?;
        Ok(o)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Ontology(m));
        if self.slots.len() < 2 {
            return bad(format!("need at least 2 slots, got {}", self.slots.len()));
        }
        for (slot, values) in &self.slots {
            if normalize(slot).is_empty() {
                return bad("empty slot name".into());
            }
            let distinct: BTreeSet<String> = values.iter().map(|v| normalize(v)).collect();
            if distinct.len() < 2 || distinct.contains("") {
                return bad(format!("slot `{slot}` needs at least 2 distinct non-empty values"));
            }
            if self.patterns_for(slot).next().is_none() {
                return bad(format!("slot `{slot}` has no utterance pattern"));
            }
        }
        for t in &self.templates {
            if t.slot != "*" && !self.slots.contains_key(&t.slot) {
                return bad(format!("template for unknown slot `{}`", t.slot));
            }
            for p in &t.patterns {
                if p.matches("{value}").count() != 1 {
                    return bad(format!("pattern `{p}` must contain {{value}} exactly once"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.match_fraction) {
            return bad(format!("match_fraction {} outside [0, 1]", self.match_fraction));
        }
        for (value, aliases) in &self.aliases {
            let v = normalize(value);
            for a in aliases {
                if normalize(a).is_empty() || normalize(a).contains(&v) {
                    return bad(format!("alias `{a}` for `{value}` is empty or contains the value"));
                }
            }
        }
        if self.match_fraction < 1.0 && self.implicit_pairs().is_empty() {
            return bad("match_fraction < 1 requires at least one aliased slot value".into());
        }
        let [tmin, tmax] = self.turns;
        let [mmin, mmax] = self.mentions_per_turn;
        if tmin == 0 || tmin > tmax || mmin == 0 || mmin > mmax {
            return bad("`turns` and `mentions_per_turn` must be non-empty [min, max] ranges".into());
        }
        if self.system_utterances.is_empty() || self.closing.trim().is_empty() {
            return bad("system utterances and closing must be non-empty".into());
        }
        Ok(())
    }

    fn patterns_for<'a>(&'a self, slot: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.templates
            .iter()
            .filter(move |t| t.slot == slot || t.slot == "*")
            .flat_map(|t| t.patterns.iter())
    }

    /// (slot, value) pairs that can be expressed implicitly.
    fn implicit_pairs(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::new();
        for (slot, values) in &self.slots {
            for v in values {
                if self.aliases.get(v).is_some_and(|a| !a.is_empty()) {
                    out.push((slot.as_str(), v.as_str()));
                }
            }
        }
        out
    }

    fn surface(&self, slot: &str, value: &str) -> String {
        if self.capitalized.iter().any(|s| s == slot) {
            value
                .split_whitespace()
                .map(|w| {
                    let mut c = w.chars();
                    match c.next() {
                        Some(f) => f.to_uppercase().chain(c).collect::<String>(),
                        None => String::new(),
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            value.to_string()
        }
    }
}

/// Generates `n` conversations. A mention is explicit (value copied verbatim)
/// with probability `match_fraction`; otherwise an aliased value is written
/// through one of its implicit phrasings.
pub fn synth_corpus(ontology: &Ontology, n: usize, seed: u64) -> Result<Vec<Conversation>> {
    ontology.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let implicit = ontology.implicit_pairs();
    let slot_names: Vec<&str> = ontology.slots.keys().map(String::as_str).collect();
    let mut out = Vec::with_capacity(n);

    for i in 0..n {
        let [tmin, tmax] = ontology.turns;
        let n_turns = rng.random_range(tmin..=tmax);
        let mut state = BeliefState::new();
        let mut used_values: BTreeSet<String> = BTreeSet::new();
        let mut turns = Vec::with_capacity(n_turns);

        for t in 0..n_turns {
            let system = if t == 0 {
                None
            } else {
                Some(ontology.system_utterances.choose(&mut rng).expect("non-empty").clone())
            };
            let [mmin, mmax] = ontology.mentions_per_turn;
            let mentions = rng.random_range(mmin..=mmax);
            let mut clauses = Vec::new();
            for _ in 0..mentions {
                let free: Vec<&str> = slot_names
                    .iter()
                    .copied()
                    .filter(|s| !state.slots().any(|x| x == normalize(s)))
                    .collect();
                if free.is_empty() {
                    break;
                }
                let explicit = rng.random::<f64>() < ontology.match_fraction;
                let implicit_choice = if explicit {
                    None
                } else {
                    let options: Vec<(&str, &str)> = implicit
                        .iter()
                        .copied()
                        .filter(|(s, v)| free.contains(s) && !used_values.contains(&normalize(v)))
                        .collect();
                    options.choose(&mut rng).copied()
                };
                let (slot, value, surface) = match implicit_choice {
                    Some((slot, value)) => {
                        let alias = ontology.aliases[value].choose(&mut rng).expect("non-empty");
                        (slot, value.to_string(), alias.clone())
                    }
                    None => {
                        let slot = *free.choose(&mut rng).expect("non-empty");
                        let pool: Vec<&String> = ontology.slots[slot]
                            .iter()
                            .filter(|v| !used_values.contains(&normalize(v)))
                            .collect();
                        let Some(value) = pool.choose(&mut rng) else {
                            continue;
                        };
                        (slot, value.to_string(), ontology.surface(slot, value))
                    }
                };
                let patterns: Vec<&String> = ontology.patterns_for(slot).collect();
                let pattern = patterns.choose(&mut rng).expect("validated");
                clauses.push(pattern.replace("{slot}", slot).replace("{value}", &surface));
                used_values.insert(normalize(&value));
                state.insert(slot, &value);
            }

            let mut user = if clauses.is_empty() {
                ontology.closing.clone()
            } else {
                format!("{} .", clauses.join(" and "))
            };
            if t == 0 && !ontology.openers.is_empty() && rng.random::<bool>() {
                let opener = ontology.openers.choose(&mut rng).expect("non-empty");
                user = format!("{opener} {user}");
            }
            turns.push(Turn::new(system.as_deref(), &user, state.clone())?);
        }

        let mentioned: BTreeSet<&str> = state.slots().collect();
        let mut domains: Vec<String> = ontology
            .domains
            .iter()
            .filter(|(_, slots)| slots.iter().any(|s| mentioned.contains(normalize(s).as_str())))
            .map(|(d, _)| d.clone())
            .collect();
        if domains.is_empty() {
            domains.push("synthetic".into());
        }
        out.push(Conversation {
            id: format!("s{seed}-{i:05}"),
            domains,
            turns,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_json, parse_corpus, value_match_rate};

    fn two_slot(match_fraction: f64) -> Ontology {
        Ontology::from_json(&format!(
            r#"{{"slots": {{"destination": ["london", "paris", "rome"], "day": ["monday", "tuesday"]}},
                "match_fraction": {match_fraction},
                "templates": [{{"slot": "destination", "patterns": ["to {{value}}"]}},
                              {{"slot": "day", "patterns": ["on {{value}}"]}}],
                "aliases": {{"monday": ["the start of the week"]}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn empty_when_n_is_zero() {
        assert!(synth_corpus(&builtin_ontology(), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn full_match_fraction_is_fully_matchable() {
        let corpus = synth_corpus(&two_slot(1.0), 10, 4).unwrap();
        assert_eq!(corpus.len(), 10);
        assert_eq!(value_match_rate(&corpus).unwrap(), 1.0);
    }

    #[test]
    fn default_match_fraction_tracks_target() {
        let corpus = synth_corpus(&builtin_ontology(), 1000, 17).unwrap();
        let rate = value_match_rate(&corpus).unwrap();
        assert!((0.88..=0.92).contains(&rate), "rate {rate}");
    }

    #[test]
    fn deterministic_and_reloadable() {
        let a = synth_corpus(&builtin_ontology(), 30, 5).unwrap();
        let b = synth_corpus(&builtin_ontology(), 30, 5).unwrap();
        assert_eq!(corpus_to_json(&a), corpus_to_json(&b));
        let back = parse_corpus(&corpus_to_json(&a)).unwrap();
        assert_eq!(back, a);
        let c = synth_corpus(&builtin_ontology(), 30, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn builtin_shape() {
        let o = builtin_ontology();
        o.validate().unwrap();
        assert_eq!(o.slots.len(), 8);
        assert!(o.slots.values().all(|v| v.len() == 16));
    }

    #[test]
    fn invalid_specs_rejected() {
        let one_slot = r#"{"slots": {"a": ["x", "y"]}, "match_fraction": 1.0,
            "templates": [{"slot": "a", "patterns": ["{value}"]}]}"#;
        assert!(Ontology::from_json(one_slot).is_err());
        let one_value = r#"{"slots": {"a": ["x"], "b": ["y", "z"]}, "match_fraction": 1.0,
            "templates": [{"slot": "*", "patterns": ["{value}"]}]}"#;
        assert!(Ontology::from_json(one_value).is_err());
        let no_alias = r#"{"slots": {"a": ["x", "w"], "b": ["y", "z"]}, "match_fraction": 0.5,
            "templates": [{"slot": "*", "patterns": ["{value}"]}]}"#;
        assert!(Ontology::from_json(no_alias).is_err());
        let no_pattern = r#"{"slots": {"a": ["x", "w"], "b": ["y", "z"]}, "match_fraction": 1.0,
            "templates": [{"slot": "a", "patterns": ["{value}"]}]}"#;
        assert!(Ontology::from_json(no_pattern).is_err());
        assert!(Ontology::from_json("not json").is_err());
    }
}
