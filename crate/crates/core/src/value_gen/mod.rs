//! Value-candidate generation: a sequence model that summarizes a dialogue
//! into `v1 | v2 | ...`, reward tuning against a frozen slot model, and a
//! rule-based extractor used as a baseline.

mod rules;

pub use rules::{rule_candidates, RuleExtractor, DEFAULT_ADJECTIVES};

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    augment_values, augmentation_origin, dialogue_history, raw_dialogue_history, BeliefState, Conversation,
};
use crate::dual_trainer::{fit, fit_with, split_holdout, FitConfig, FitOutcome, Part, AUGMENT_STREAM};
use crate::error::{Error, Result};
use crate::eval::same_values;
use crate::lm::{LanguageModel, Objective, TokenId, TrainBatch, TrainItem, WeightedSequence, EOA, SEP};
use crate::prompts::{
    builtin_template, join_value_sequence, parse_value_sequence, render_value_prompt, render_valueseq_prompt,
    PromptTemplate, TemplateId,
};
use crate::text::{normalize, token_f1};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueGenConfig {
    /// Weight of the likelihood term during reward tuning.
    pub lambda: f64,
    pub lr: f64,
    /// Minimum number of turns per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub reward_template_id: TemplateId,
    pub holdout: f64,
    pub history_budget: Option<usize>,
    /// Decoding budget for a value sequence.
    pub max_new: usize,
    pub tune_lr: f64,
    pub tune_max_epochs: usize,
    pub tune_patience: usize,
    /// Value-swapped copies of each training conversation (see
    /// `TrainConfig::augment_copies`).
    pub augment_copies: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub augment_pool: BTreeMap<String, Vec<String>>,
}

impl Default for ValueGenConfig {
    fn default() -> Self {
        ValueGenConfig {
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 40,
            patience: 3,
            seed: 0,
            reward_template_id: TemplateId::F2,
            holdout: 0.1,
            history_budget: Some(96),
            max_new: 40,
            tune_lr: 2e-4,
            tune_max_epochs: 6,
            tune_patience: 2,
            augment_copies: 0,
            augment_pool: BTreeMap::new(),
        }
    }
}

impl ValueGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("value generator config: {m}")));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must be in (0, 1), got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.tune_lr > 0.0 && self.tune_lr.is_finite()) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch_size == 0 || self.patience == 0 || self.tune_patience == 0 {
            return bad("batch_size and patience must be >= 1".into());
        }
        if !TemplateId::VALUE_PROMPTS.contains(&self.reward_template_id) {
            return bad(format!("reward template must be one of f1..f4, got {}", self.reward_template_id));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must be in [0, 1), got {}", self.holdout));
        }
        Ok(())
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    fn tune_config(&self) -> FitConfig {
        FitConfig {
            lr: self.tune_lr,
            batch_size: self.batch_size,
            max_epochs: self.tune_max_epochs,
            patience: self.tune_patience,
            seed: self.seed.wrapping_add(1),
        }
    }
}

/// One value-generation example: a turn with its ordered gold values.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueItem {
    pub conversation_id: String,
    pub turn_index: usize,
    pub history: String,
    pub state: BeliefState,
    pub values: Vec<String>,
}

impl ValueItem {
    pub fn turn_id(&self) -> String {
        format!("{}#{}", self.conversation_id, self.turn_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub step: usize,
    pub turn_id: String,
    pub candidate_value: String,
    pub matched_gold_slot: Option<String>,
    pub reward: f64,
}

/// Word offset of the first whole-word occurrence of `needle` in `hay`.
fn first_mention(hay: &[&str], needle: &[&str]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Distinct gold values in first-mention order; values absent from the
/// history follow in alphabetical order.
pub fn ordered_values(history: &str, state: &BeliefState) -> Vec<String> {
    let hay: Vec<&str> = history.split_whitespace().collect();
    let mut keyed: Vec<(usize, String)> = Vec::new();
    for v in state.values() {
        if keyed.iter().any(|(_, k)| k == v) {
            continue;
        }
        let needle: Vec<&str> = v.split_whitespace().collect();
        let pos = first_mention(&hay, &needle).unwrap_or(usize::MAX);
        keyed.push((pos, v.to_string()));
    }
    keyed.sort();
    keyed.into_iter().map(|(_, v)| v).collect()
}

/// One item per turn of every conversation.
pub fn value_items(corpus: &[Conversation], budget: Option<usize>) -> Result<Vec<ValueItem>> {
    let mut out = Vec::new();
    for conv in corpus {
        for (t, turn) in conv.turns.iter().enumerate() {
            let history = dialogue_history(conv, t, budget)?;
            let values = ordered_values(&history, &turn.state);
            out.push(ValueItem {
                conversation_id: conv.id.clone(),
                turn_index: t,
                history,
                state: turn.state.clone(),
                values,
            });
        }
    }
    Ok(out)
}

fn valueseq_prefix<M: LanguageModel>(model: &M, history: &str) -> Vec<TokenId> {
    model.vocab().encode(&render_valueseq_prompt(history).prefix)
}

/// Teacher-forced target `v1 | v2 ... EOA`.
pub fn value_target<M: LanguageModel>(model: &M, values: &[String]) -> Vec<TokenId> {
    let mut t = model.vocab().encode(&join_value_sequence(values));
    t.push(EOA);
    t
}

fn nll_part<M: LanguageModel>(model: &M, items: &[&ValueItem]) -> Result<Objective> {
    TrainBatch::new(
        items
            .iter()
            .map(|it| TrainItem::new(valueseq_prefix(model, &it.history), value_target(model, &it.values)))
            .collect(),
    )
    .objective()
}

pub struct ValueGenResult<M> {
    pub model: M,
    pub outcome: FitOutcome,
}

/// Held-out split of the corpus turns, with augmented copies of the
/// training turns appended to the training side.
fn split_items(corpus: &[Conversation], cfg: &ValueGenConfig) -> Result<(Vec<ValueItem>, Vec<ValueItem>)> {
    let items = value_items(corpus, cfg.history_budget)?;
    if !items.iter().any(|i| !i.values.is_empty()) {
        return Err(Error::EmptyTrainingSet("no turn has a non-empty belief state".into()));
    }
    let (mut train, dev) = split_holdout(items, cfg.holdout, cfg.seed);
    if cfg.augment_copies > 0 {
        let held: HashSet<(&str, usize)> = dev.iter().map(|i| (i.conversation_id.as_str(), i.turn_index)).collect();
        let copies = augment_values(corpus, cfg.augment_copies, &cfg.augment_pool, cfg.seed ^ AUGMENT_STREAM)?;
        let extra: Vec<ValueItem> = value_items(&copies, cfg.history_budget)?
            .into_iter()
            .filter(|i| !held.contains(&(augmentation_origin(&i.conversation_id), i.turn_index)))
            .collect();
        train.extend(extra);
    }
    Ok((train, dev))
}

pub fn train_value_generator<M: LanguageModel + Clone>(
    model: M,
    corpus: &[Conversation],
    cfg: &ValueGenConfig,
) -> Result<ValueGenResult<M>> {
    cfg.validate()?;
    let (train, dev) = split_items(corpus, cfg)?;
    let build = |m: &M, items: &[&ValueItem]| -> Result<Vec<Part>> {
        Ok(vec![Part {
            objective: nll_part(m, items)?,
            coef: 1.0,
        }])
    };
    let mut model = model;
    let outcome = fit(&mut model, &train, &dev, &cfg.fit_config(), |_| 1, &build)?;
    Ok(ValueGenResult { model, outcome })
}

/// Greedy value sequence for a history, parsed into distinct values.
pub fn generate_values<M: LanguageModel>(model: &M, history: &str, max_new: usize) -> Result<Vec<String>> {
    let out = model.generate(&valueseq_prefix(model, history), max_new)?;
    Ok(parse_value_sequence(&out.text))
}

fn reward_query<M: LanguageModel>(
    slot_model: &M,
    tpl: &PromptTemplate,
    history: &str,
    candidate: &str,
    slot: &str,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let prefix = slot_model.vocab().encode(&render_value_prompt(tpl, history, candidate)?.prefix);
    let mut target = slot_model.vocab().encode(slot);
    target.push(EOA);
    Ok((prefix, target))
}

/// Per-token geometric-mean probability of `target_slot` given the value prompt.
pub fn compute_reward<M: LanguageModel>(
    slot_model: &M,
    tpl: &PromptTemplate,
    history: &str,
    candidate: &str,
    target_slot: &str,
) -> Result<f64> {
    let (prefix, target) = reward_query(slot_model, tpl, history, candidate, target_slot)?;
    let lp = slot_model.sequence_logprob(&prefix, &target)?;
    Ok((lp / target.len() as f64).exp())
}

/// Rewards for many `(history, candidate, slot)` queries in one evaluation.
pub fn compute_rewards<M: LanguageModel>(
    slot_model: &M,
    tpl: &PromptTemplate,
    queries: &[(&str, &str, &str)],
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let mut obj = Objective::default();
    for (h, c, s) in queries {
        let (prefix, target) = reward_query(slot_model, tpl, h, c, s)?;
        obj.push(WeightedSequence::uniform(prefix, target, 0.0));
    }
    let eval = slot_model.evaluate(&obj)?;
    Ok(eval
        .logprobs
        .iter()
        .map(|lp| (lp.iter().sum::<f64>() / lp.len() as f64).exp())
        .collect())
}

/// Gold pair for a generated value: exact value match, else the best token
/// overlap above 0.5.
pub fn align_candidate<'a>(candidate: &str, gold: &'a BeliefState) -> Option<(&'a str, &'a str)> {
    let cand = normalize(candidate);
    if let Some(p) = gold.iter().find(|(_, v)| *v == cand) {
        return Some(p);
    }
    let mut best: Option<((&str, &str), f64)> = None;
    for (s, v) in gold.iter() {
        let f = token_f1(&cand, v);
        if f > 0.5 && best.is_none_or(|(_, b)| f > b) {
            best = Some(((s, v), f));
        }
    }
    best.map(|(p, _)| p)
}

/// A greedy decode split into `|`-separated candidate spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Token range of each non-empty candidate.
    pub spans: Vec<std::ops::Range<usize>>,
    pub candidates: Vec<String>,
}

pub fn rollout<M: LanguageModel>(model: &M, history: &str, max_new: usize) -> Result<Rollout> {
    let out = model.generate(&valueseq_prefix(model, history), max_new)?;
    let end = out.tokens.iter().position(|&t| t == EOA).unwrap_or(out.tokens.len());
    let mut spans = Vec::new();
    let mut candidates = Vec::new();
    let mut start = 0;
    for i in 0..=end {
        if i == end || out.tokens[i] == SEP {
            if i > start {
                let text = normalize(&model.vocab().decode(&out.tokens[start..i]));
                if !text.is_empty() {
                    spans.push(start..i);
                    candidates.push(text);
                }
            }
            start = i + 1;
        }
    }
    Ok(Rollout {
        tokens: out.tokens,
        spans,
        candidates,
    })
}

/// `L_r` for one batch: each candidate span's tokens weighted by its reward,
/// averaged over turns.
pub fn reward_objective(prefixes: &[Vec<TokenId>], rollouts: &[Rollout], rewards: &[Vec<f64>]) -> Objective {
    let n = rollouts.len().max(1) as f64;
    let mut obj = Objective::default();
    for ((prefix, r), rw) in prefixes.iter().zip(rollouts).zip(rewards) {
        let mut weights = vec![0.0; r.tokens.len()];
        for (span, &rv) in r.spans.iter().zip(rw) {
            for w in &mut weights[span.clone()] {
                *w = rv / n;
            }
        }
        if weights.iter().any(|&w| w != 0.0) {
            obj.push(WeightedSequence {
                prefix: prefix.clone(),
                target: r.tokens.clone(),
                weights,
            });
        }
    }
    obj
}

/// Parts `(lambda * L', (1 - lambda) * L_r)` for one batch, plus the reward trace.
pub fn tuning_parts<M: LanguageModel, S: LanguageModel>(
    value_model: &M,
    slot_model: &S,
    tpl: &PromptTemplate,
    items: &[&ValueItem],
    cfg: &ValueGenConfig,
) -> Result<(Vec<Part>, Vec<RewardRecord>)> {
    let mut rollouts = Vec::with_capacity(items.len());
    let mut queries = Vec::new();
    let mut matched: Vec<Vec<Option<String>>> = Vec::with_capacity(items.len());
    for it in items {
        let r = rollout(value_model, &it.history, cfg.max_new)?;
        let mut m = Vec::with_capacity(r.candidates.len());
        for c in &r.candidates {
            let slot = align_candidate(c, &it.state).map(|(s, _)| s.to_string());
            m.push(slot);
        }
        rollouts.push(r);
        matched.push(m);
    }
    for ((it, r), m) in items.iter().zip(&rollouts).zip(&matched) {
        for (c, s) in r.candidates.iter().zip(m) {
            if let Some(s) = s {
                queries.push((it.history.as_str(), c.as_str(), s.as_str()));
            }
        }
    }
    let mut flat = compute_rewards(slot_model, tpl, &queries)?.into_iter();
    let mut rewards = Vec::with_capacity(items.len());
    let mut trace = Vec::new();
    for ((it, r), m) in items.iter().zip(&rollouts).zip(&matched) {
        let mut rw = Vec::with_capacity(m.len());
        for (c, s) in r.candidates.iter().zip(m) {
            let v = if s.is_some() { flat.next().expect("one reward per query") } else { 0.0 };
            rw.push(v);
            trace.push(RewardRecord {
                step: 0,
                turn_id: it.turn_id(),
                candidate_value: c.clone(),
                matched_gold_slot: s.clone(),
                reward: v,
            });
        }
        rewards.push(rw);
    }
    let prefixes: Vec<Vec<TokenId>> = items.iter().map(|it| valueseq_prefix(value_model, &it.history)).collect();
    let parts = vec![
        Part {
            objective: nll_part(value_model, items)?,
            coef: cfg.lambda,
        },
        Part {
            objective: reward_objective(&prefixes, &rollouts, &rewards),
            coef: 1.0 - cfg.lambda,
        },
    ];
    Ok((parts, trace))
}

/// Fraction of items whose generated value set equals the gold value multiset.
pub fn value_accuracy<M: LanguageModel>(model: &M, items: &[ValueItem], max_new: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Metric("no turns to score".into()));
    }
    let mut hits = 0;
    for it in items {
        let pred = generate_values(model, &it.history, max_new)?;
        if same_values(pred.iter().map(String::as_str), it.state.values()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

pub struct TuneResult<M> {
    pub model: M,
    pub outcome: FitOutcome,
    pub rewards: Vec<RewardRecord>,
}

/// Reward tuning of `value_model` against a frozen `slot_model`. The
/// held-out turns (same split as generator training) select the snapshot
/// with the best turn-level value accuracy, the untuned model included.
pub fn scst_tune<M: LanguageModel + Clone, S: LanguageModel>(
    value_model: M,
    slot_model: &S,
    corpus: &[Conversation],
    cfg: &ValueGenConfig,
) -> Result<TuneResult<M>> {
    cfg.validate()?;
    if !slot_model.is_frozen() {
        return Err(Error::InvalidArgument("slot model must be frozen before reward tuning".into()));
    }
    let tpl = builtin_template(cfg.reward_template_id);
    let (train, dev) = split_items(corpus, cfg)?;
    let trace = RefCell::new(Vec::new());
    let step = RefCell::new(0usize);
    let build = |m: &M, items: &[&ValueItem]| -> Result<Vec<Part>> {
        let (parts, mut records) = tuning_parts(m, slot_model, &tpl, items, cfg)?;
        let mut s = step.borrow_mut();
        *s += 1;
        records.iter_mut().for_each(|r| r.step = *s);
        trace.borrow_mut().extend(records);
        Ok(parts)
    };
    let mut score = |m: &M| -> Result<f64> { Ok(-value_accuracy(m, &dev, cfg.max_new)?) };
    let mut model = value_model;
    let outcome = fit_with(&mut model, &train, !dev.is_empty(), &cfg.tune_config(), |_| 1, &build, &mut score)?;
    Ok(TuneResult {
        model,
        outcome,
        rewards: trace.into_inner(),
    })
}

/// Writes `step,turn_id,candidate,matched_slot,reward` rows.
pub fn write_reward_csv(path: &Path, records: &[RewardRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["step", "turn_id", "candidate", "matched_slot", "reward"]).map_err(io)?;
    for r in records {
        w.write_record([
            r.step.to_string().as_str(),
            &r.turn_id,
            &r.candidate_value,
            r.matched_gold_slot.as_deref().unwrap_or(""),
            &r.reward.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rule-baseline candidates for turn `t`, from the raw (cased) history.
pub fn rule_candidates_for_turn(conv: &Conversation, t: usize, budget: Option<usize>) -> Result<Vec<String>> {
    Ok(rule_candidates(&raw_dialogue_history(conv, t, budget)?))
}
