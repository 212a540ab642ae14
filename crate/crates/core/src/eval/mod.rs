//! Joint goal accuracy, slot accuracy and turn-level value accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{BeliefState, Conversation};
use crate::error::{Error, Result};
use crate::inference::Prediction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotStat {
    pub acc: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAccuracy {
    pub overall: f64,
    pub per_slot: BTreeMap<String, SlotStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub slot_accuracy: f64,
    pub turn_value_accuracy: f64,
    pub per_slot: BTreeMap<String, SlotStat>,
    pub n_turns: usize,
}

/// Multiset equality of two value lists.
pub fn same_values<'a, 'b>(a: impl IntoIterator<Item = &'a str>, b: impl IntoIterator<Item = &'b str>) -> bool {
    let mut a: Vec<&str> = a.into_iter().collect();
    let mut b: Vec<&str> = b.into_iter().collect();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// Pairs every gold turn with its prediction; gold order is kept.
fn align<'a>(preds: &'a [Prediction], gold: &'a [Conversation]) -> Result<Vec<(&'a BeliefState, &'a BeliefState)>> {
    let mut by_key: HashMap<(&str, usize), &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_key.insert((p.conversation_id.as_str(), p.turn_index), p).is_some() {
            return Err(Error::Metric(format!(
                "duplicate prediction for {}#{}",
                p.conversation_id, p.turn_index
            )));
        }
    }
    let mut out = Vec::with_capacity(preds.len());
    for conv in gold {
        for (t, turn) in conv.turns.iter().enumerate() {
            let p = by_key
                .get(&(conv.id.as_str(), t))
                .ok_or_else(|| Error::Metric(format!("missing prediction for {}#{t}", conv.id)))?;
            out.push((&p.belief_state, &turn.state));
        }
    }
    if out.len() != preds.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} gold turns",
            preds.len(),
            out.len()
        )));
    }
    if out.is_empty() {
        return Err(Error::Metric("no turns to evaluate".into()));
    }
    Ok(out)
}

pub fn joint_goal_accuracy(preds: &[Prediction], gold: &[Conversation]) -> Result<f64> {
    let pairs = align(preds, gold)?;
    let hits = pairs.iter().filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Among gold pairs whose value was predicted in that turn, the fraction
/// predicted with the gold slot.
pub fn slot_accuracy(preds: &[Prediction], gold: &[Conversation]) -> Result<SlotAccuracy> {
    let pairs = align(preds, gold)?;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, g) in pairs {
        for (slot, value) in g.iter() {
            if !p.values().any(|v| v == value) {
                continue;
            }
            let c = counts.entry(slot.to_string()).or_default();
            c.1 += 1;
            if p.contains(slot, value) {
                c.0 += 1;
            }
        }
    }
    let (hit, total) = counts.values().fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
    let per_slot = counts
        .into_iter()
        .map(|(s, (h, n))| {
            (
                s,
                SlotStat {
                    acc: h as f64 / n as f64,
                    support: n,
                },
            )
        })
        .collect();
    Ok(SlotAccuracy {
        overall: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
        per_slot,
    })
}

pub fn turn_value_accuracy(preds: &[Prediction], gold: &[Conversation]) -> Result<f64> {
    let pairs = align(preds, gold)?;
    let hits = pairs.iter().filter(|(p, g)| same_values(p.values(), g.values())).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn evaluate(preds: &[Prediction], gold: &[Conversation]) -> Result<EvalReport> {
    let sa = slot_accuracy(preds, gold)?;
    Ok(EvalReport {
        jga: joint_goal_accuracy(preds, gold)?,
        slot_accuracy: sa.overall,
        turn_value_accuracy: turn_value_accuracy(preds, gold)?,
        per_slot: sa.per_slot,
        n_turns: preds.len(),
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "turns                {}", self.n_turns);
        let _ = writeln!(s, "joint goal accuracy  {:.4}", self.jga);
        let _ = writeln!(s, "slot accuracy        {:.4}", self.slot_accuracy);
        let _ = writeln!(s, "turn value accuracy  {:.4}", self.turn_value_accuracy);
        if !self.per_slot.is_empty() {
            let _ = writeln!(s, "\n{:<20} {:>8} {:>8}", "slot", "acc", "support");
            for (slot, st) in &self.per_slot {
                let _ = writeln!(s, "{:<20} {:>8.4} {:>8}", slot, st.acc, st.support);
            }
        }
        s
    }
}

/// Computes all metrics and writes `<out>.json` and `<out>.txt`.
pub fn report(preds: &[Prediction], gold: &[Conversation], out: &Path) -> Result<EvalReport> {
    let rep = evaluate(preds, gold)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = out.with_extension("json");
    let mut text = serde_json::to_string_pretty(&rep)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let txt = out.with_extension("txt");
    std::fs::write(&txt, rep.to_table()).map_err(|e| Error::io(&txt, e))?;
    Ok(rep)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests;
