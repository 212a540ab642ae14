//! Belief-state prediction: value candidates, then one (ensembled) slot
//! decode per candidate.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{dialogue_history, BeliefState, Conversation};
use crate::error::{Error, Result};
use crate::lm::{ensemble_decode, normalize_weights, LanguageModel, EOA};
use crate::prompts::{builtin_template, render_slot_prompt, render_value_prompt, PromptTemplate, TemplateId};
use crate::text::normalize;
use crate::value_gen::generate_values;

/// Serializable ensemble description: checkpoints, their templates and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    /// Defaults to equal weights when empty.
    #[serde(default)]
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub template_id: TemplateId,
}

impl EnsembleSpec {
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.weights.is_empty() {
            if self.members.is_empty() {
                return Err(Error::InvalidWeights("ensemble has no members".into()));
            }
            return Ok(vec![1.0 / self.members.len() as f64; self.members.len()]);
        }
        if self.weights.len() != self.members.len() {
            return Err(Error::InvalidWeights(format!(
                "{} members, {} weights",
                self.members.len(),
                self.weights.len()
            )));
        }
        normalize_weights(&self.weights)
    }
}

/// Loaded ensemble: one model and value-prompt template per member.
pub struct Ensemble<'a, M> {
    pub models: Vec<&'a M>,
    pub templates: Vec<PromptTemplate>,
    pub weights: Vec<f64>,
}

impl<'a, M: LanguageModel> Ensemble<'a, M> {
    pub fn new(models: Vec<&'a M>, templates: Vec<PromptTemplate>, weights: Vec<f64>) -> Result<Self> {
        if models.is_empty() || models.len() != templates.len() || models.len() != weights.len() {
            return Err(Error::InvalidWeights(format!(
                "{} models, {} templates, {} weights",
                models.len(),
                templates.len(),
                weights.len()
            )));
        }
        normalize_weights(&weights)?;
        if models.iter().skip(1).any(|m| m.vocab() != models[0].vocab()) {
            return Err(Error::VocabularyMismatch("ensemble members use different vocabularies".into()));
        }
        Ok(Ensemble {
            models,
            templates,
            weights,
        })
    }

    /// Equal-weight ensemble over the builtin templates.
    pub fn uniform(members: Vec<(&'a M, TemplateId)>) -> Result<Self> {
        let k = members.len().max(1) as f64;
        let weights = vec![1.0 / k; members.len()];
        let (models, ids): (Vec<_>, Vec<_>) = members.into_iter().unzip();
        Self::new(models, ids.into_iter().map(builtin_template).collect(), weights)
    }

    pub fn single(model: &'a M, id: TemplateId) -> Result<Self> {
        Self::uniform(vec![(model, id)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub history_budget: Option<usize>,
    pub max_value_tokens: usize,
    pub max_slot_tokens: usize,
    /// Self-check threshold; 0 disables the filter.
    pub self_check_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            history_budget: Some(96),
            max_value_tokens: 40,
            max_slot_tokens: 6,
            self_check_threshold: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub conversation_id: String,
    pub turn_index: usize,
    pub belief_state: BeliefState,
    /// Slot score of each pair, in `belief_state` iteration order.
    pub scores: Vec<f64>,
}

/// Per-member decode states after consuming the history, reused across values.
struct HistoryStates<M: LanguageModel> {
    history: String,
    states: Vec<M::State>,
}

fn history_states<M: LanguageModel>(ens: &Ensemble<'_, M>, history: &str) -> Result<HistoryStates<M>> {
    let tokens = ens.models[0].vocab().encode(history);
    let states = ens
        .models
        .iter()
        .map(|m| m.start_decode(&tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(HistoryStates {
        history: history.to_string(),
        states,
    })
}

fn slot_from_states<M: LanguageModel>(
    ens: &Ensemble<'_, M>,
    hs: &HistoryStates<M>,
    value: &str,
    max_new: usize,
) -> Result<(String, f64)> {
    let mut states = Vec::with_capacity(ens.models.len());
    for ((m, tpl), base) in ens.models.iter().zip(&ens.templates).zip(&hs.states) {
        let prefix = render_value_prompt(tpl, &hs.history, value)?.prefix;
        // Templates that begin with the history continue from the cached state.
        let state = match prefix.strip_prefix(hs.history.as_str()) {
            Some(rest) if rest.starts_with(char::is_whitespace) || rest.is_empty() => {
                let mut s = base.clone();
                m.extend(&mut s, &m.vocab().encode(rest))?;
                s
            }
            _ => m.start_decode(&m.vocab().encode(&prefix))?,
        };
        states.push(state);
    }
    let out = ensemble_decode(&ens.models, &ens.weights, states, max_new)?;
    let score = if out.stepwise_logprobs.is_empty() {
        f64::NEG_INFINITY
    } else {
        out.logprob() / out.stepwise_logprobs.len() as f64
    };
    Ok((normalize(&out.text), score))
}

/// Slot for `value`: each member renders its own template and all members
/// decode in lockstep. The score is the mean step log-probability.
pub fn predict_slot<M: LanguageModel>(
    ens: &Ensemble<'_, M>,
    history: &str,
    value: &str,
    max_new: usize,
) -> Result<(String, f64)> {
    if value.trim().is_empty() {
        return Err(Error::InvalidArgument("cannot predict a slot for an empty value".into()));
    }
    let hs = history_states(ens, history)?;
    slot_from_states(ens, &hs, value, max_new)
}

/// Per-token geometric-mean probability of `value` under the slot prompt.
pub fn self_check<M: LanguageModel>(model: &M, history: &str, slot: &str, value: &str) -> Result<f64> {
    let prefix = model.vocab().encode(&render_slot_prompt(history, slot)?.prefix);
    let mut target = model.vocab().encode(value);
    target.push(EOA);
    let lp = model.sequence_logprob(&prefix, &target)?;
    Ok((lp / target.len() as f64).exp())
}

/// Predicted state from already generated value candidates.
pub fn predict_from_values<M: LanguageModel>(
    ens: &Ensemble<'_, M>,
    history: &str,
    values: &[String],
    cfg: &InferenceConfig,
    checker: Option<&M>,
) -> Result<(BeliefState, Vec<f64>)> {
    let mut best: Vec<(String, String, f64)> = Vec::new();
    if !values.is_empty() {
        let hs = history_states(ens, history)?;
        for value in values {
            let (slot, score) = slot_from_states(ens, &hs, value, cfg.max_slot_tokens)?;
            if slot.is_empty() {
                continue;
            }
            if cfg.self_check_threshold > 0.0 {
                let model = checker.unwrap_or(ens.models[0]);
                if self_check(model, history, &slot, value)? < cfg.self_check_threshold {
                    continue;
                }
            }
            match best.iter_mut().find(|(s, _, _)| *s == slot) {
                Some(entry) if score > entry.2 => *entry = (slot, value.clone(), score),
                Some(_) => {}
                None => best.push((slot, value.clone(), score)),
            }
        }
    }
    let state = BeliefState::from_pairs(best.iter().map(|(s, v, _)| (s.as_str(), v.as_str())));
    let scores = state
        .iter()
        .map(|(s, v)| best.iter().find(|b| b.0 == s && b.1 == v).map_or(0.0, |b| b.2))
        .collect();
    Ok((state, scores))
}

pub fn predict_belief_state<M: LanguageModel>(
    value_model: &M,
    ens: &Ensemble<'_, M>,
    conv: &Conversation,
    t: usize,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    let history = dialogue_history(conv, t, cfg.history_budget)?;
    let values = generate_values(value_model, &history, cfg.max_value_tokens)?;
    let (belief_state, scores) = predict_from_values(ens, &history, &values, cfg, None)?;
    Ok(Prediction {
        conversation_id: conv.id.clone(),
        turn_index: t,
        belief_state,
        scores,
    })
}

/// One prediction per turn, in corpus order.
pub fn predict_corpus<M: LanguageModel>(
    value_model: &M,
    ens: &Ensemble<'_, M>,
    corpus: &[Conversation],
    cfg: &InferenceConfig,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for conv in corpus {
        for t in 0..conv.turns.len() {
            out.push(predict_belief_state(value_model, ens, conv, t, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    turn: usize,
    state: Vec<[String; 2]>,
    scores: Vec<f64>,
}

pub fn predictions_to_jsonl(preds: &[Prediction]) -> Result<String> {
    let mut out = String::new();
    for p in preds {
        let line = PredictionLine {
            id: p.conversation_id.clone(),
            turn: p.turn_index,
            state: p.belief_state.iter().map(|(s, v)| [s.to_string(), v.to_string()]).collect(),
            scores: p.scores.iter().map(|&s| if s.is_finite() { s } else { f64::MIN }).collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("predictions line {}: {e}", i + 1)))?;
        let belief_state = BeliefState::from_pairs(p.state.iter().map(|[s, v]| (s.as_str(), v.as_str())));
        if belief_state.len() != p.state.len() {
            return Err(Error::InvalidArgument(format!(
                "predictions line {}: duplicate or empty pairs",
                i + 1
            )));
        }
        if p.scores.len() != p.state.len() {
            return Err(Error::InvalidArgument(format!(
                "predictions line {}: {} pairs but {} scores",
                i + 1,
                p.state.len(),
                p.scores.len()
            )));
        }
        out.push(Prediction {
            conversation_id: p.id,
            turn_index: p.turn,
            belief_state,
            scores: p.scores,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    std::fs::write(path, predictions_to_jsonl(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LanguageModel;
    use crate::testutil::*;
    use std::sync::OnceLock;

    struct Fixture {
        corpus: Vec<Conversation>,
        slot_models: Vec<crate::lm::CausalLM>,
        value_model: crate::lm::CausalLM,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let corpus = london_corpus();
            let vocab = vocab_for(&corpus);
            let slot_models = TemplateId::VALUE_PROMPTS
                .iter()
                .enumerate()
                .map(|(i, &t)| memorized_slot_model(&corpus, &vocab, t, 10 + i as u64))
                .collect();
            let value_model = memorized_value_model(&corpus, &vocab, 20);
            Fixture {
                corpus,
                slot_models,
                value_model,
            }
        })
    }

    fn history(f: &Fixture) -> String {
        dialogue_history(&f.corpus[0], 0, None).unwrap()
    }

    fn all_four(f: &Fixture) -> Ensemble<'_, crate::lm::CausalLM> {
        Ensemble::uniform(f.slot_models.iter().zip(TemplateId::VALUE_PROMPTS).collect()).unwrap()
    }

    #[test]
    fn single_member_matches_plain_generation() {
        let f = fixture();
        let h = history(f);
        for (m, &t) in f.slot_models.iter().zip(&TemplateId::VALUE_PROMPTS) {
            let ens = Ensemble::single(m, t).unwrap();
            let (slot, _) = predict_slot(&ens, &h, "london", 6).unwrap();
            let prefix = render_value_prompt(&builtin_template(t), &h, "london").unwrap().prefix;
            let direct = m.generate(&m.vocab().encode(&prefix), 6).unwrap();
            assert_eq!(slot, normalize(&direct.text));
        }
    }

    #[test]
    fn four_memorized_members_agree() {
        let f = fixture();
        let ens = all_four(f);
        assert_eq!(predict_slot(&ens, &history(f), "london", 6).unwrap().0, "destination");
        assert_eq!(predict_slot(&ens, &history(f), "tuesday", 6).unwrap().0, "day");
    }

    #[test]
    fn degenerate_weights_select_first_member() {
        let f = fixture();
        let h = history(f);
        let ens = Ensemble::new(
            f.slot_models.iter().collect(),
            TemplateId::VALUE_PROMPTS.iter().map(|&t| builtin_template(t)).collect(),
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let first = Ensemble::single(&f.slot_models[0], TemplateId::F1).unwrap();
        for v in ["london", "tuesday", "york", "paris"] {
            assert_eq!(
                predict_slot(&ens, &h, v, 6).unwrap(),
                predict_slot(&first, &h, v, 6).unwrap()
            );
        }
    }

    #[test]
    fn weight_scaling_and_identical_members() {
        let f = fixture();
        let h = history(f);
        let m = &f.slot_models[1];
        let single = Ensemble::single(m, TemplateId::F2).unwrap();
        let copies = Ensemble::new(vec![m; 4], vec![builtin_template(TemplateId::F2); 4], vec![0.25; 4]).unwrap();
        let a = all_four(f);
        let scaled = Ensemble::new(a.models.clone(), a.templates.clone(), vec![3.0; 4]).unwrap();
        for v in ["london", "tuesday", "york", "17:00", "on"] {
            assert_eq!(predict_slot(&copies, &h, v, 6).unwrap().0, predict_slot(&single, &h, v, 6).unwrap().0);
            assert_eq!(predict_slot(&scaled, &h, v, 6).unwrap().0, predict_slot(&a, &h, v, 6).unwrap().0);
        }
    }

    #[test]
    fn self_check_prefers_gold_slot() {
        let f = fixture();
        let h = history(f);
        let m = &f.slot_models[0];
        let gold = self_check(m, &h, "destination", "london").unwrap();
        let other = self_check(m, &h, "time", "london").unwrap();
        assert!(gold > other, "{gold} vs {other}");
        for s in [gold, other] {
            assert!(s > 0.0 && s <= 1.0);
        }
    }

    #[test]
    fn belief_state_from_memorized_models() {
        let f = fixture();
        let ens = all_four(f);
        let cfg = InferenceConfig {
            history_budget: None,
            ..InferenceConfig::default()
        };
        let p = predict_belief_state(&f.value_model, &ens, &f.corpus[0], 0, &cfg).unwrap();
        assert_eq!(p.belief_state, BeliefState::from_pairs([("destination", "london"), ("day", "tuesday")]));
        assert_eq!(p.scores.len(), 2);

        let h = history(f);
        let (empty, scores) = predict_from_values(&ens, &h, &[], &cfg, None).unwrap();
        assert!(empty.is_empty() && scores.is_empty());

        // both candidates decode to "destination": one pair survives
        let (st, _) = predict_from_values(&ens, &h, &["london".into(), "london please".into()], &cfg, None).unwrap();
        let slots: Vec<&str> = st.slots().collect();
        let mut dedup = slots.clone();
        dedup.dedup();
        assert_eq!(slots, dedup);
    }

    #[test]
    fn disabled_self_check_changes_nothing() {
        let f = fixture();
        let ens = all_four(f);
        let h = history(f);
        let values = vec!["london".to_string(), "tuesday".to_string(), "york".to_string()];
        let off = InferenceConfig::default();
        let strict = InferenceConfig {
            self_check_threshold: 0.999_999,
            ..InferenceConfig::default()
        };
        let a = predict_from_values(&ens, &h, &values, &off, None).unwrap();
        let b = predict_from_values(&ens, &h, &values, &off, Some(&f.slot_models[3])).unwrap();
        assert_eq!(a, b);
        let c = predict_from_values(&ens, &h, &values, &strict, None).unwrap();
        assert!(c.0.len() <= a.0.len());
    }

    #[test]
    fn corpus_prediction_counts_and_determinism() {
        let f = fixture();
        let ens = all_four(f);
        let cfg = InferenceConfig::default();
        assert!(predict_corpus(&f.value_model, &ens, &[], &cfg).unwrap().is_empty());
        let corpus: Vec<Conversation> = (0..3)
            .map(|i| conversation(&format!("d{i}"), &[("to london", &[("destination", "london")]), ("on tuesday", &[("day", "tuesday")])]))
            .collect();
        let a = predict_corpus(&f.value_model, &ens, &corpus, &cfg).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, predict_corpus(&f.value_model, &ens, &corpus, &cfg).unwrap());
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let preds = vec![
            Prediction {
                conversation_id: "a".into(),
                turn_index: 0,
                belief_state: BeliefState::from_pairs([("day", "monday"), ("time", "17:00")]),
                scores: vec![-0.5, -0.25],
            },
            Prediction {
                conversation_id: "a".into(),
                turn_index: 1,
                belief_state: BeliefState::new(),
                scores: vec![],
            },
        ];
        let text = predictions_to_jsonl(&preds).unwrap();
        assert!(text.starts_with(r#"{"id":"a","turn":0,"state":[["day","monday"],["time","17:00"]],"scores":[-0.5,-0.25]}"#));
        assert_eq!(parse_predictions(&text).unwrap(), preds);
        assert!(parse_predictions(r#"{"id":"a","turn":0,"state":[["day","x"]],"scores":[]}"#).is_err());
        assert!(parse_predictions("{").is_err());
    }

    #[test]
    fn ensemble_spec_weights() {
        let m = |t| EnsembleMember {
            checkpoint: PathBuf::from("x"),
            template_id: t,
        };
        let spec = EnsembleSpec {
            members: vec![m(TemplateId::F1), m(TemplateId::F2), m(TemplateId::F3), m(TemplateId::F4)],
            weights: vec![],
        };
        assert_eq!(spec.weights().unwrap(), vec![0.25; 4]);
        let bad = EnsembleSpec {
            weights: vec![0.0; 4],
            ..spec.clone()
        };
        assert!(bad.weights().is_err());
        let empty = predict_slot(&Ensemble::single(&fixture().slot_models[0], TemplateId::F1).unwrap(), "h", " ", 3);
        assert!(empty.is_err());
    }
}
