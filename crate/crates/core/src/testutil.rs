//! Small corpora and memorized models for unit tests.

use crate::corpus::{BeliefState, Conversation, Turn};
use crate::dual_trainer::{build_vocabulary, train_with_template, TrainConfig};
use crate::lm::{CausalLM, LMConfig, Vocabulary};
use crate::prompts::{builtin_template, TemplateId, TemplateSet};
use crate::value_gen::{train_value_generator, ValueGenConfig};

pub fn tiny_config(seed: u64) -> LMConfig {
    LMConfig {
        layers: 1,
        model_dim: 24,
        heads: 2,
        context_length: 48,
        seed,
        positions: Default::default(),
    }
}

pub fn conversation(id: &str, turns: &[(&str, &[(&str, &str)])]) -> Conversation {
    let mut state = BeliefState::new();
    Conversation {
        id: id.into(),
        domains: vec!["train".into()],
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, (user, pairs))| {
                for (s, v) in pairs.iter() {
                    state.insert(s, v);
                }
                let sys = (i > 0).then_some("ok");
                Turn::new(sys, user, state.clone()).unwrap()
            })
            .collect(),
    }
}

/// One turn mentioning london and tuesday, plus a distractor conversation.
pub fn london_corpus() -> Vec<Conversation> {
    vec![
        conversation("c1", &[("i want to go to london on tuesday", &[("destination", "london"), ("day", "tuesday")])]),
        conversation("c2", &[("leaving from york at 17:00", &[("departure", "york"), ("time", "17:00")])]),
    ]
}

pub fn vocab_for(corpus: &[Conversation]) -> Vocabulary {
    build_vocabulary(corpus, &TemplateSet::default())
}

pub fn memorize_config(template: TemplateId) -> TrainConfig {
    TrainConfig {
        template_id: template,
        w: 0.1,
        lr: 1e-2,
        batch_size: 64,
        max_epochs: 120,
        patience: 1,
        seed: 3,
        holdout: 0.0,
        history_budget: None,
        augment_copies: 0,
        augment_pool: Default::default(),
    }
}

pub fn memorized_slot_model(corpus: &[Conversation], vocab: &Vocabulary, template: TemplateId, seed: u64) -> CausalLM {
    let model = CausalLM::new(tiny_config(seed), vocab.clone()).unwrap();
    let cfg = memorize_config(template);
    let mut m = train_with_template(model, corpus, None, &cfg, &builtin_template(template))
        .unwrap()
        .model;
    m.freeze();
    m
}

pub fn memorize_value_config() -> ValueGenConfig {
    ValueGenConfig {
        lr: 1e-2,
        batch_size: 64,
        max_epochs: 150,
        holdout: 0.0,
        history_budget: None,
        ..ValueGenConfig::default()
    }
}

pub fn memorized_value_model(corpus: &[Conversation], vocab: &Vocabulary, seed: u64) -> CausalLM {
    let model = CausalLM::new(tiny_config(seed), vocab.clone()).unwrap();
    train_value_generator(model, corpus, &memorize_value_config()).unwrap().model
}
