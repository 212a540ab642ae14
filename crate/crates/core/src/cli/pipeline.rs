//! End-to-end experiment stages shared by the command-line runner and tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    builtin_ontology, load_corpus, sample_few_shot, strip_slot, synth_corpus, Conversation, FewShotConfig, Ontology,
};
use crate::dual_trainer::{build_vocabulary, train_with_template, write_loss_csv, FitOutcome, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, same_values, EvalReport};
use crate::inference::{predict_corpus, write_predictions, Ensemble, InferenceConfig, Prediction};
use crate::lm::{encode_checkpoint, load_checkpoint, CausalLM, LMConfig, LanguageModel, Vocabulary};
use crate::prompts::{TemplateId, TemplateSet};
use crate::value_gen::{
    generate_values, rule_candidates_for_turn, scst_tune, train_value_generator, value_items, write_reward_csv,
    RewardRecord, ValueGenConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Ontology file; the builtin benchmark ontology when absent.
    pub ontology: Option<PathBuf>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            ontology: None,
            n_train: 200,
            n_dev: 0,
            n_test: 100,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Used for every split without a file.
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub few_shot: FewShotConfig,
    pub model: LMConfig,
    pub templates: Vec<TemplateId>,
    /// Optional JSON file overriding template patterns.
    pub template_file: Option<PathBuf>,
    /// Shared by all slot models; template id and seeds are set per member.
    pub train: TrainConfig,
    pub value_gen: ValueGenConfig,
    pub tune: bool,
    pub inference: InferenceConfig,
    /// Ensemble weights, one per template; equal when empty.
    pub ensemble_weights: Vec<f64>,
    /// Slot removed from the slot models' training labels (the value
    /// generator still sees its values).
    pub unseen_slot: Option<String>,
    /// Draw augmentation replacements from the synthetic ontology as well
    /// as from the training labels.
    pub augment_from_ontology: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            few_shot: FewShotConfig { ratio: 1.0, seed: 0 },
            model: LMConfig {
                context_length: 128,
                ..LMConfig::default()
            },
            templates: TemplateId::VALUE_PROMPTS.to_vec(),
            template_file: None,
            train: TrainConfig::default(),
            value_gen: ValueGenConfig::default(),
            tune: true,
            inference: InferenceConfig::default(),
            ensemble_weights: Vec::new(),
            unseen_slot: None,
            augment_from_ontology: false,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Derives every seed from one base seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.few_shot.seed = seed;
        self.model.seed = seed.wrapping_mul(1000);
        self.train.seed = seed.wrapping_mul(1000);
        self.value_gen.seed = seed.wrapping_mul(1000).wrapping_add(500);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.value_gen.validate()?;
        if self.templates.is_empty() {
            return Err(Error::InvalidArgument("at least one template is required".into()));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if !TemplateId::VALUE_PROMPTS.contains(t) {
                return Err(Error::InvalidArgument(format!("{t} is not a value-prompt template")));
            }
            if self.templates[..i].contains(t) {
                return Err(Error::InvalidArgument(format!("template {t} listed twice")));
            }
        }
        if !self.ensemble_weights.is_empty() && self.ensemble_weights.len() != self.templates.len() {
            return Err(Error::InvalidWeights(format!(
                "{} templates, {} ensemble weights",
                self.templates.len(),
                self.ensemble_weights.len()
            )));
        }
        if !(self.few_shot.ratio > 0.0 && self.few_shot.ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "few-shot ratio must be in (0, 1], got {}",
                self.few_shot.ratio
            )));
        }
        let mut tc = self.train.clone();
        tc.template_id = self.templates[0];
        tc.validate()
    }

    /// Canonical JSON used for the config hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.template_file {
            Some(p) => TemplateSet::load(p),
            None => Ok(TemplateSet::default()),
        }
    }

    /// Train config of the slot model for `template` (k-th in the list).
    pub fn member_train_config(&self, template: TemplateId) -> TrainConfig {
        let k = template_offset(template);
        TrainConfig {
            template_id: template,
            seed: self.train.seed.wrapping_add(k),
            history_budget: self.train.history_budget,
            ..self.train.clone()
        }
    }

    /// Extra augmentation values per slot.
    pub fn augment_pool(&self) -> Result<BTreeMap<String, Vec<String>>> {
        if self.augment_from_ontology {
            Ok(load_ontology(&self.data.synth)?.slots)
        } else {
            Ok(BTreeMap::new())
        }
    }

    pub fn member_model_config(&self, template: TemplateId) -> LMConfig {
        LMConfig {
            seed: self.model.seed.wrapping_add(template_offset(template)),
            ..self.model.clone()
        }
    }

    pub fn value_model_config(&self) -> LMConfig {
        LMConfig {
            seed: self.model.seed.wrapping_add(100),
            ..self.model.clone()
        }
    }

    pub fn ensemble_weights(&self) -> Vec<f64> {
        if self.ensemble_weights.is_empty() {
            vec![1.0 / self.templates.len() as f64; self.templates.len()]
        } else {
            self.ensemble_weights.clone()
        }
    }
}

fn template_offset(t: TemplateId) -> u64 {
    TemplateId::VALUE_PROMPTS.iter().position(|&x| x == t).unwrap_or(0) as u64 + 1
}

#[derive(Clone, Debug)]
pub struct Splits {
    /// Full training split (vocabulary source).
    pub train_full: Vec<Conversation>,
    /// Few-shot subset used for training.
    pub train: Vec<Conversation>,
    pub dev: Option<Vec<Conversation>>,
    pub test: Vec<Conversation>,
}

pub fn load_ontology(cfg: &SynthConfig) -> Result<Ontology> {
    match &cfg.ontology {
        Some(p) => Ontology::load(p),
        None => Ok(builtin_ontology()),
    }
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let synth = &cfg.data.synth;
    let needs_synth = cfg.data.train.is_none() || cfg.data.test.is_none();
    let ontology = if needs_synth { Some(load_ontology(synth)?) } else { None };
    let make = |n: usize, offset: u64| synth_corpus(ontology.as_ref().expect("ontology loaded"), n, synth.seed + offset);
    let train_full = match &cfg.data.train {
        Some(p) => load_corpus(p)?,
        None => make(synth.n_train, 0)?,
    };
    let test = match &cfg.data.test {
        Some(p) => load_corpus(p)?,
        None => make(synth.n_test, 1)?,
    };
    let dev = match &cfg.data.dev {
        Some(p) => Some(load_corpus(p)?),
        None if synth.n_dev > 0 && ontology.is_some() => Some(make(synth.n_dev, 2)?),
        None => None,
    };
    let train = sample_few_shot(&train_full, &cfg.few_shot)?;
    Ok(Splits {
        train_full,
        train,
        dev,
        test,
    })
}

pub fn experiment_vocabulary(cfg: &ExperimentConfig, splits: &Splits) -> Result<Vocabulary> {
    Ok(build_vocabulary(&splits.train_full, &cfg.template_set()?))
}

pub struct SlotModel {
    pub template: TemplateId,
    pub model: CausalLM,
    pub outcome: FitOutcome,
}

pub fn train_slot_model(
    cfg: &ExperimentConfig,
    splits: &Splits,
    vocab: &Vocabulary,
    template: TemplateId,
    w: f64,
) -> Result<SlotModel> {
    let templates = cfg.template_set()?;
    let mut tc = cfg.member_train_config(template);
    tc.w = w;
    tc.augment_pool = cfg.augment_pool()?;
    let corpus = match &cfg.unseen_slot {
        Some(s) => strip_slot(&splits.train, s),
        None => splits.train.clone(),
    };
    let dev = splits.dev.as_ref().map(|d| match &cfg.unseen_slot {
        Some(s) => strip_slot(d, s),
        None => d.clone(),
    });
    let model = CausalLM::new(cfg.member_model_config(template), vocab.clone())?;
    let res = train_with_template(model, &corpus, dev.as_deref(), &tc, templates.get(template))?;
    let mut model = res.model;
    model.freeze();
    Ok(SlotModel {
        template,
        model,
        outcome: res.outcome,
    })
}

pub struct ValueModels {
    pub untuned: CausalLM,
    pub tuned: Option<CausalLM>,
    pub train_outcome: FitOutcome,
    pub tune_outcome: Option<FitOutcome>,
    pub rewards: Vec<RewardRecord>,
}

impl ValueModels {
    pub fn best(&self) -> &CausalLM {
        self.tuned.as_ref().unwrap_or(&self.untuned)
    }
}

pub fn train_value_models(
    cfg: &ExperimentConfig,
    splits: &Splits,
    vocab: &Vocabulary,
    slot_models: &[SlotModel],
) -> Result<ValueModels> {
    let model = CausalLM::new(cfg.value_model_config(), vocab.clone())?;
    let vcfg = ValueGenConfig {
        augment_pool: cfg.augment_pool()?,
        ..cfg.value_gen.clone()
    };
    let res = train_value_generator(model, &splits.train, &vcfg)?;
    let mut untuned = res.model;
    untuned.freeze();
    let mut out = ValueModels {
        untuned,
        tuned: None,
        train_outcome: res.outcome,
        tune_outcome: None,
        rewards: Vec::new(),
    };
    if cfg.tune {
        let reward_model = slot_models
            .iter()
            .find(|m| m.template == cfg.value_gen.reward_template_id)
            .or(slot_models.first())
            .ok_or_else(|| Error::InvalidArgument("reward tuning needs a trained slot model".into()))?;
        let mut vcfg = vcfg.clone();
        vcfg.reward_template_id = reward_model.template;
        let mut start = out.untuned.clone();
        start.unfreeze();
        let tuned = scst_tune(start, &reward_model.model, &splits.train, &vcfg)?;
        let mut model = tuned.model;
        model.freeze();
        out.tuned = Some(model);
        out.tune_outcome = Some(tuned.outcome);
        out.rewards = tuned.rewards;
    }
    Ok(out)
}

pub fn ensemble_of<'a>(cfg: &ExperimentConfig, slot_models: &'a [SlotModel]) -> Result<Ensemble<'a, CausalLM>> {
    ensemble_from(cfg, slot_models.iter().map(|m| (m.template, &m.model)).collect())
}

/// Ensemble over `(template, model)` members with the configured weights.
pub fn ensemble_from<'a>(cfg: &ExperimentConfig, members: Vec<(TemplateId, &'a CausalLM)>) -> Result<Ensemble<'a, CausalLM>> {
    let templates = cfg.template_set()?;
    let weights = cfg.ensemble_weights();
    Ensemble::new(
        members.iter().map(|(_, m)| *m).collect(),
        members.iter().map(|(t, _)| templates.get(*t).clone()).collect(),
        weights,
    )
}

/// Turn-level value accuracy of a generator on a corpus.
pub fn generator_value_accuracy(model: &CausalLM, corpus: &[Conversation], cfg: &InferenceConfig) -> Result<f64> {
    let items = value_items(corpus, cfg.history_budget)?;
    if items.is_empty() {
        return Err(Error::Metric("no turns to score".into()));
    }
    let mut hits = 0;
    for it in &items {
        let pred = generate_values(model, &it.history, cfg.max_value_tokens)?;
        if same_values(pred.iter().map(String::as_str), it.state.values()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Turn-level value accuracy of the rule-based extractor.
pub fn rule_value_accuracy(corpus: &[Conversation], cfg: &InferenceConfig) -> Result<f64> {
    let mut hits = 0;
    let mut n = 0;
    for conv in corpus {
        for (t, turn) in conv.turns.iter().enumerate() {
            let pred = rule_candidates_for_turn(conv, t, cfg.history_budget)?;
            n += 1;
            if same_values(pred.iter().map(String::as_str), turn.state.values()) {
                hits += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("no turns to score".into()));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueAccuracies {
    pub rule: f64,
    pub untuned: f64,
    pub tuned: Option<f64>,
}

/// Slot models and value generators from one training run.
pub struct Trained {
    pub slot_models: Vec<SlotModel>,
    pub values: ValueModels,
}

/// Trains every configured slot model, then the value generator (and its
/// reward-tuned version). Errors carry the stage name.
pub fn train_models(cfg: &ExperimentConfig, splits: &Splits, vocab: &Vocabulary) -> Result<Trained> {
    cfg.validate()?;
    let mut slot_models = Vec::new();
    for &t in &cfg.templates {
        let m = train_slot_model(cfg, splits, vocab, t, cfg.train.w).map_err(|e| e.in_stage(format!("train slot model {t}")))?;
        slot_models.push(m);
    }
    let values = train_value_models(cfg, splits, vocab, &slot_models).map_err(|e| e.in_stage("train value generator"))?;
    Ok(Trained { slot_models, values })
}

/// Checkpoint file names and bytes, slot models first.
pub fn checkpoint_files(trained: &Trained) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for m in &trained.slot_models {
        files.push((slot_checkpoint_name(m.template), encode_checkpoint(&m.model)?));
    }
    files.push((VALUE_CHECKPOINT.to_string(), encode_checkpoint(&trained.values.untuned)?));
    if let Some(t) = &trained.values.tuned {
        files.push((TUNED_VALUE_CHECKPOINT.to_string(), encode_checkpoint(t)?));
    }
    Ok(files)
}

pub fn digests(files: &[(String, Vec<u8>)]) -> BTreeMap<String, String> {
    files.iter().map(|(n, b)| (n.clone(), digest(b))).collect()
}

/// Writes checkpoints, loss traces and (if tuned) the reward trace.
pub fn write_training(dir: &Path, trained: &Trained, files: &[(String, Vec<u8>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    for m in &trained.slot_models {
        write_loss_csv(&dir.join(format!("loss_{}.csv", m.template)), &m.outcome.history)?;
    }
    write_loss_csv(&dir.join("loss_value_gen.csv"), &trained.values.train_outcome.history)?;
    if trained.values.tuned.is_some() {
        write_reward_csv(&dir.join("rewards.csv"), &trained.values.rewards)?;
    }
    Ok(())
}

/// Checkpoints read back from a training directory.
pub struct LoadedModels {
    pub slot_models: Vec<(TemplateId, CausalLM)>,
    pub value_model: CausalLM,
    /// File the value generator came from.
    pub value_checkpoint: String,
}

impl LoadedModels {
    pub fn members(&self) -> Vec<(TemplateId, &CausalLM)> {
        self.slot_models.iter().map(|(t, m)| (*t, m)).collect()
    }
}

/// Loads the configured slot models and the value generator (the tuned one
/// when present) from `dir`, checking that all share one vocabulary.
pub fn load_models(cfg: &ExperimentConfig, dir: &Path) -> Result<LoadedModels> {
    let mut slot_models = Vec::new();
    for &t in &cfg.templates {
        let mut m = load_checkpoint(&dir.join(slot_checkpoint_name(t)))?;
        m.freeze();
        slot_models.push((t, m));
    }
    let tuned = dir.join(TUNED_VALUE_CHECKPOINT);
    let value_checkpoint = if tuned.exists() { TUNED_VALUE_CHECKPOINT } else { VALUE_CHECKPOINT };
    let value_model = load_checkpoint(&dir.join(value_checkpoint))?;
    for (t, m) in &slot_models {
        if m.vocab() != value_model.vocab() {
            return Err(Error::VocabularyMismatch(format!(
                "{} and {value_checkpoint} were built with different vocabularies",
                slot_checkpoint_name(*t)
            )));
        }
    }
    Ok(LoadedModels {
        slot_models,
        value_model,
        value_checkpoint: value_checkpoint.to_string(),
    })
}

/// Predicts every test turn with the ensemble of `members`.
pub fn predict_split(
    cfg: &ExperimentConfig,
    value_model: &CausalLM,
    members: Vec<(TemplateId, &CausalLM)>,
    test: &[Conversation],
) -> Result<Vec<Prediction>> {
    let ens = ensemble_from(cfg, members)?;
    predict_corpus(value_model, &ens, test, &cfg.inference).map_err(|e| e.in_stage("predict"))
}

/// Everything produced by one full run.
pub struct RunOutput {
    pub slot_models: Vec<SlotModel>,
    pub values: ValueModels,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
    pub value_accuracy: ValueAccuracies,
    /// SHA-256 of every checkpoint's bytes, keyed by file name.
    pub checkpoint_digests: BTreeMap<String, String>,
}

pub fn slot_checkpoint_name(t: TemplateId) -> String {
    format!("slot_{t}.ckpt")
}

pub const VALUE_CHECKPOINT: &str = "value_gen.ckpt";
pub const TUNED_VALUE_CHECKPOINT: &str = "value_gen_tuned.ckpt";

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn value_accuracies(cfg: &ExperimentConfig, values: &ValueModels, test: &[Conversation]) -> Result<ValueAccuracies> {
    Ok(ValueAccuracies {
        rule: rule_value_accuracy(test, &cfg.inference)?,
        untuned: generator_value_accuracy(&values.untuned, test, &cfg.inference)?,
        tuned: values
            .tuned
            .as_ref()
            .map(|m| generator_value_accuracy(m, test, &cfg.inference))
            .transpose()?,
    })
}

/// Trains every configured model, predicts the test split and scores it.
/// With `out`, checkpoints, loss traces, predictions and the report are written there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let vocab = experiment_vocabulary(cfg, &splits)?;
    let trained = train_models(cfg, &splits, &vocab)?;
    let members = trained.slot_models.iter().map(|m| (m.template, &m.model)).collect();
    let predictions = predict_split(cfg, trained.values.best(), members, &splits.test)?;
    let report = evaluate(&predictions, &splits.test).map_err(|e| e.in_stage("evaluate"))?;
    let value_accuracy = value_accuracies(cfg, &trained.values, &splits.test)?;
    let files = checkpoint_files(&trained)?;
    if let Some(dir) = out {
        write_training(dir, &trained, &files)?;
        write_predictions(&dir.join("predictions.jsonl"), &predictions)?;
        crate::eval::report(&predictions, &splits.test, &dir.join("report"))?;
    }
    Ok(RunOutput {
        slot_models: trained.slot_models,
        values: trained.values,
        predictions,
        report,
        value_accuracy,
        checkpoint_digests: digests(&files),
    })
}
