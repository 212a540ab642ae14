//! Value-prompt templates (slot generation), the slot-prompt template (value
//! generation) and the value-sequence prompt, plus parsing of generated
//! value sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize;

pub const HISTORY: &str = "[c]";
pub const VALUE: &str = "[v]";
pub const SLOT: &str = "[s]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "f1")]
    F1,
    #[serde(rename = "f2")]
    F2,
    #[serde(rename = "f3")]
    F3,
    #[serde(rename = "f4")]
    F4,
    #[serde(rename = "I")]
    SlotPrompt,
    #[serde(rename = "VSEQ")]
    ValueSeq,
}

impl TemplateId {
    pub const VALUE_PROMPTS: [TemplateId; 4] = [TemplateId::F1, TemplateId::F2, TemplateId::F3, TemplateId::F4];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::F1 => "f1",
            TemplateId::F2 => "f2",
            TemplateId::F3 => "f3",
            TemplateId::F4 => "f4",
            TemplateId::SlotPrompt => "I",
            TemplateId::ValueSeq => "VSEQ",
        }
    }

    pub fn answer_role(self) -> AnswerRole {
        match self {
            TemplateId::F1 | TemplateId::F2 | TemplateId::F3 | TemplateId::F4 => AnswerRole::Slot,
            TemplateId::SlotPrompt => AnswerRole::Value,
            TemplateId::ValueSeq => AnswerRole::ValueSequence,
        }
    }

    /// Parses a comma-separated list such as `f1,f2`.
    pub fn parse_list(s: &str) -> Result<Vec<TemplateId>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse())
            .collect()
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(TemplateId::F1),
            "f2" => Ok(TemplateId::F2),
            "f3" => Ok(TemplateId::F3),
            "f4" => Ok(TemplateId::F4),
            "I" => Ok(TemplateId::SlotPrompt),
            "VSEQ" => Ok(TemplateId::ValueSeq),
            other => Err(Error::InvalidArgument(format!("unknown template id `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRole {
    Slot,
    Value,
    ValueSequence,
}

impl AnswerRole {
    fn placeholder(self) -> Option<&'static str> {
        match self {
            AnswerRole::Slot => Some(SLOT),
            AnswerRole::Value => Some(VALUE),
            AnswerRole::ValueSequence => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub pattern: String,
    pub answer_role: AnswerRole,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, pattern: impl Into<String>) -> Result<Self> {
        let tpl = PromptTemplate {
            id,
            pattern: pattern.into(),
            answer_role: id.answer_role(),
        };
        tpl.validate()?;
        Ok(tpl)
    }

    fn validate(&self) -> Result<()> {
        let err = |detail: &str| {
            Err(Error::Template {
                id: self.id.to_string(),
                detail: detail.to_string(),
            })
        };
        if self.pattern.matches(HISTORY).count() != 1 {
            return err("pattern must contain [c] exactly once");
        }
        match self.answer_role {
            AnswerRole::Slot => {
                if self.pattern.matches(VALUE).count() != 1 {
                    return err("value prompt must contain [v] exactly once");
                }
            }
            AnswerRole::Value => {
                if self.pattern.matches(SLOT).count() != 1 {
                    return err("slot prompt must contain [s] exactly once");
                }
            }
            AnswerRole::ValueSequence => {
                if self.pattern.contains(VALUE) || self.pattern.contains(SLOT) {
                    return err("value-sequence prompt takes no [v] or [s]");
                }
            }
        }
        if let Some(answer) = self.answer_role.placeholder() {
            if self.pattern.matches(answer).count() != 1 || !self.pattern.ends_with(answer) {
                return err("answer placeholder must occur once, at the end of the pattern");
            }
        }
        Ok(())
    }

    /// Pattern text preceding the answer placeholder.
    fn body(&self) -> &str {
        match self.answer_role.placeholder() {
            Some(p) => &self.pattern[..self.pattern.len() - p.len()],
            None => &self.pattern,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    /// Everything before the answer position.
    pub prefix: String,
    pub template_id: TemplateId,
    pub bound_values: BTreeMap<&'static str, String>,
}

/// The built-in patterns, in order f1, f2, f3, f4, I, VSEQ.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    [
        (TemplateId::F1, "[c] belief states: value = [v], slot = [s]"),
        (TemplateId::F2, "[c] belief states: [v] = [s]"),
        (TemplateId::F3, "[c] [v] is the value of [s]"),
        (TemplateId::F4, "[c] What is the slot type of [v] ? [s]"),
        (TemplateId::SlotPrompt, "[c] belief states: [s] = [v]"),
        (TemplateId::ValueSeq, "[c] => value : "),
    ]
    .into_iter()
    .map(|(id, p)| PromptTemplate::new(id, p).expect("builtin templates are valid"))
    .collect()
}

pub fn builtin_template(id: TemplateId) -> PromptTemplate {
    builtin_templates()
        .into_iter()
        .find(|t| t.id == id)
        .expect("every id has a builtin")
}

/// A full template set, optionally overridden from a JSON config
/// (`{"f1": "...", "I": "..."}`); missing ids keep their builtin pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: builtin_templates().into_iter().map(|t| (t.id, t)).collect(),
        }
    }
}

impl TemplateSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let overrides: BTreeMap<String, String> = serde_json::from_str(text)?;
        let mut set = TemplateSet::default();
        for (id, pattern) in overrides {
            let id: TemplateId = id.parse()?;
            set.templates.insert(id, PromptTemplate::new(id, pattern)?);
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }
}

fn bind(tpl: &PromptTemplate, history: &str, value: Option<&str>, slot: Option<&str>) -> RenderedPrompt {
    let mut bound = BTreeMap::new();
    bound.insert(HISTORY, history.to_string());
    // Substitute piecewise so that placeholder-like text inside the history is left alone.
    let body = tpl.body();
    let mut prefix = String::with_capacity(body.len() + history.len() + 16);
    let mut rest = body;
    while !rest.is_empty() {
        let next = [HISTORY, VALUE, SLOT]
            .iter()
            .filter_map(|p| rest.find(p).map(|i| (i, *p)))
            .min_by_key(|(i, _)| *i);
        match next {
            Some((i, p)) => {
                prefix.push_str(&rest[..i]);
                match p {
                    HISTORY => prefix.push_str(history),
                    VALUE => prefix.push_str(value.unwrap_or(VALUE)),
                    _ => prefix.push_str(slot.unwrap_or(SLOT)),
                }
                rest = &rest[i + p.len()..];
            }
            None => {
                prefix.push_str(rest);
                break;
            }
        }
    }
    if let Some(v) = value {
        bound.insert(VALUE, v.to_string());
    }
    if let Some(s) = slot {
        bound.insert(SLOT, s.to_string());
    }
    RenderedPrompt {
        prefix,
        template_id: tpl.id,
        bound_values: bound,
    }
}

/// Binds history and value into a value prompt; the slot is the answer.
pub fn render_value_prompt(tpl: &PromptTemplate, history: &str, value: &str) -> Result<RenderedPrompt> {
    if tpl.answer_role != AnswerRole::Slot {
        return Err(Error::Template {
            id: tpl.id.to_string(),
            detail: "not a value prompt (answer role must be slot)".into(),
        });
    }
    if value.trim().is_empty() {
        return Err(Error::InvalidArgument("value prompt needs a non-empty value".into()));
    }
    Ok(bind(tpl, history, Some(value), None))
}

/// Renders the builtin slot prompt `[c] belief states: [s] = [v]`.
pub fn render_slot_prompt(history: &str, slot: &str) -> Result<RenderedPrompt> {
    render_slot_prompt_with(&builtin_template(TemplateId::SlotPrompt), history, slot)
}

pub fn render_slot_prompt_with(tpl: &PromptTemplate, history: &str, slot: &str) -> Result<RenderedPrompt> {
    if tpl.answer_role != AnswerRole::Value {
        return Err(Error::Template {
            id: tpl.id.to_string(),
            detail: "not a slot prompt (answer role must be value)".into(),
        });
    }
    if slot.trim().is_empty() {
        return Err(Error::InvalidArgument("slot prompt needs a non-empty slot".into()));
    }
    Ok(bind(tpl, history, None, Some(slot)))
}

pub fn render_valueseq_prompt(history: &str) -> RenderedPrompt {
    bind(&builtin_template(TemplateId::ValueSeq), history, None, None)
}

pub fn render_valueseq_prompt_with(tpl: &PromptTemplate, history: &str) -> Result<RenderedPrompt> {
    if tpl.answer_role != AnswerRole::ValueSequence {
        return Err(Error::Template {
            id: tpl.id.to_string(),
            detail: "not a value-sequence prompt".into(),
        });
    }
    Ok(bind(tpl, history, None, None))
}

/// Splits a generated `v1 | v2 | ...` sequence into normalized, distinct values.
pub fn parse_value_sequence(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in text.split('|') {
        let v = normalize(piece);
        if !v.is_empty() && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

pub fn join_value_sequence<S: AsRef<str>>(values: &[S]) -> String {
    values.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" | ")
}
