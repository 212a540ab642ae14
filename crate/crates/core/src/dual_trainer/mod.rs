//! Dual-task training: value prompts teach slot generation, the slot prompt
//! teaches value generation, and both losses share one model.

mod fit;

pub use fit::{evaluate_parts, fit, fit_with, split_holdout, DevRecord, FitConfig, FitOutcome, Part, StepRecord};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{augment_values, augmentation_origin, make_instances, Conversation, Instance};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, Objective, TrainBatch, TrainItem, Vocabulary, EOA};
use crate::prompts::{
    builtin_template, render_slot_prompt, render_value_prompt, PromptTemplate, TemplateId, TemplateSet, HISTORY, SLOT,
    VALUE,
};
use crate::text::normalize;

/// Seed offset separating the augmentation stream from shuffling.
pub const AUGMENT_STREAM: u64 = 0x6175_6720;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub template_id: TemplateId,
    /// Weight of the slot-prompt loss.
    pub w: f64,
    pub lr: f64,
    /// Minimum number of instances per batch; whole turns are never split.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of turns held out for early stopping when no dev set is given.
    pub holdout: f64,
    /// Word budget for the dialogue history.
    pub history_budget: Option<usize>,
    /// Value-swapped copies of each training conversation added to the
    /// training turns (held-out turns are never copied).
    pub augment_copies: usize,
    /// Extra replacement values per slot for augmentation.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub augment_pool: BTreeMap<String, Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            template_id: TemplateId::F2,
            w: 0.1,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 3,
            seed: 0,
            holdout: 0.1,
            history_budget: Some(96),
            augment_copies: 0,
            augment_pool: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !TemplateId::VALUE_PROMPTS.contains(&self.template_id) {
            return bad(format!("template must be one of f1..f4, got {}", self.template_id));
        }
        if !(0.0..1.0).contains(&self.w) {
            return bad(format!("w must be in [0, 1), got {}", self.w));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
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
}

/// Index-aligned value-side and slot-side batches built from one instance list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualBatch {
    pub value_side: TrainBatch,
    pub slot_side: TrainBatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualLoss {
    pub total: f64,
    pub value: f64,
    pub slot: f64,
}

fn answer(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let mut t = vocab.encode(text);
    t.push(EOA);
    t
}

pub fn build_dual_batch(instances: &[Instance], tpl: &PromptTemplate, vocab: &Vocabulary) -> Result<DualBatch> {
    let mut batch = DualBatch::default();
    for (i, inst) in instances.iter().enumerate() {
        if inst.slot.trim().is_empty() || inst.value.trim().is_empty() || inst.history.trim().is_empty() {
            return Err(Error::InvalidArgument(format!("instance {i} has an empty field")));
        }
        let vp = render_value_prompt(tpl, &inst.history, &inst.value)?;
        batch
            .value_side
            .items
            .push(TrainItem::new(vocab.encode(&vp.prefix), answer(vocab, &inst.slot)));
        let sp = render_slot_prompt(&inst.history, &inst.slot)?;
        batch
            .slot_side
            .items
            .push(TrainItem::new(vocab.encode(&sp.prefix), answer(vocab, &inst.value)));
    }
    Ok(batch)
}

/// `(L, L_v, L_s)` from two separate likelihood evaluations.
pub fn dual_loss<M: LanguageModel>(model: &M, batch: &DualBatch, w: f64) -> Result<DualLoss> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("w must be finite and >= 0, got {w}")));
    }
    let value = model.nll(&batch.value_side)?;
    let slot = model.nll(&batch.slot_side)?;
    Ok(DualLoss {
        total: value + w * slot,
        value,
        slot,
    })
}

/// Weighted parts of the dual objective, in order (value side, slot side).
pub fn dual_parts(batch: &DualBatch, w: f64) -> Result<Vec<Part>> {
    Ok(vec![
        Part {
            objective: batch.value_side.objective()?,
            coef: 1.0,
        },
        Part {
            objective: batch.slot_side.objective()?,
            coef: w,
        },
    ])
}

/// Word-level vocabulary over a corpus (utterances and gold labels) plus the
/// literal words of every template.
pub fn build_vocabulary(corpus: &[Conversation], templates: &TemplateSet) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for conv in corpus {
        for turn in &conv.turns {
            if let Some(sys) = &turn.system {
                texts.push(normalize(sys.text()));
            }
            texts.push(normalize(turn.user.text()));
            for (s, v) in turn.state.iter() {
                texts.push(format!("{s} {v}"));
            }
        }
    }
    for tpl in templates.iter() {
        let mut p = tpl.pattern.clone();
        for ph in [HISTORY, VALUE, SLOT] {
            p = p.replace(ph, " ");
        }
        texts.push(p);
    }
    Vocabulary::build(texts.iter().map(String::as_str))
}

pub struct TrainResult<M> {
    pub model: M,
    pub outcome: FitOutcome,
}

/// Groups instances by turn so that prompts sharing a history stay together.
fn turn_groups(instances: Vec<Instance>) -> Vec<Vec<Instance>> {
    let mut groups: Vec<Vec<Instance>> = Vec::new();
    for inst in instances {
        match groups.last_mut() {
            Some(g) if g[0].conversation_id == inst.conversation_id && g[0].turn_index == inst.turn_index => g.push(inst),
            _ => groups.push(vec![inst]),
        }
    }
    groups
}

pub fn train<M: LanguageModel + Clone>(model: M, corpus: &[Conversation], cfg: &TrainConfig) -> Result<TrainResult<M>> {
    train_with_template(model, corpus, None, cfg, &builtin_template(cfg.template_id))
}

/// Trains on `corpus`; early stopping uses `dev` if given, otherwise a
/// held-out fraction of the training turns.
pub fn train_with_template<M: LanguageModel + Clone>(
    model: M,
    corpus: &[Conversation],
    dev: Option<&[Conversation]>,
    cfg: &TrainConfig,
    tpl: &PromptTemplate,
) -> Result<TrainResult<M>> {
    cfg.validate()?;
    if tpl.id != cfg.template_id {
        return Err(Error::InvalidArgument(format!(
            "template {} does not match config template {}",
            tpl.id, cfg.template_id
        )));
    }
    let groups = turn_groups(make_instances(corpus, cfg.history_budget));
    if groups.is_empty() {
        return Err(Error::EmptyTrainingSet("corpus has no (slot, value) pairs".into()));
    }
    let (mut train_groups, dev_groups) = match dev {
        Some(d) => (groups, turn_groups(make_instances(d, cfg.history_budget))),
        None => split_holdout(groups, cfg.holdout, cfg.seed),
    };
    if cfg.augment_copies > 0 {
        let held: HashSet<(&str, usize)> = if dev.is_some() {
            HashSet::new()
        } else {
            dev_groups.iter().map(|g| (g[0].conversation_id.as_str(), g[0].turn_index)).collect()
        };
        let copies = augment_values(corpus, cfg.augment_copies, &cfg.augment_pool, cfg.seed ^ AUGMENT_STREAM)?;
        let extra: Vec<Vec<Instance>> = turn_groups(make_instances(&copies, cfg.history_budget))
            .into_iter()
            .filter(|g| !held.contains(&(augmentation_origin(&g[0].conversation_id), g[0].turn_index)))
            .collect();
        train_groups.extend(extra);
    }
    let vocab = model.vocab().clone();
    let w = cfg.w;
    let build = |_: &M, gs: &[&Vec<Instance>]| -> Result<Vec<Part>> {
        let insts: Vec<Instance> = gs.iter().flat_map(|g| g.iter().cloned()).collect();
        dual_parts(&build_dual_batch(&insts, tpl, &vocab)?, w)
    };
    let mut model = model;
    let outcome = fit(&mut model, &train_groups, &dev_groups, &cfg.fit_config(), |g| g.len(), &build)?;
    Ok(TrainResult { model, outcome })
}

/// Writes `step,epoch,loss,loss_v,loss_s` rows.
pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["step", "epoch", "loss", "loss_v", "loss_s"]).map_err(io)?;
    for r in history {
        let part = |i: usize| r.parts.get(i).map_or(String::new(), f64::to_string);
        w.write_record([r.step.to_string(), r.epoch.to_string(), r.loss.to_string(), part(0), part(1)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Total dual objective used for gradient steps.
pub fn combined_objective(parts: &[Part]) -> Objective {
    fit::combine(parts)
}
