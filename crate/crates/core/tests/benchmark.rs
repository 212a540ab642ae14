//! Long-running checks on the 200-dialogue synthetic benchmark.

use dualprompt::cli::pipeline::{
    experiment_vocabulary, load_splits, predict_split, train_models, ExperimentConfig,
};
use dualprompt::corpus::{builtin_ontology, synth_corpus};
use dualprompt::dual_trainer::{build_vocabulary, train, TrainConfig};
use dualprompt::eval::evaluate;
use dualprompt::lm::{CausalLM, LMConfig};
use dualprompt::prompts::{TemplateId, TemplateSet};

#[test]
fn default_dual_training_converges() {
    let corpus = synth_corpus(&builtin_ontology(), 200, 1).unwrap();
    let vocab = build_vocabulary(&corpus, &TemplateSet::default());
    let model = CausalLM::new(LMConfig::default(), vocab).unwrap();
    let out = train(model, &corpus, &TrainConfig::default()).unwrap().outcome;
    let initial = out.history[0].loss;
    let last_epoch = out.history.last().unwrap().epoch;
    let tail: Vec<f64> = out.history.iter().filter(|r| r.epoch == last_epoch).map(|r| r.loss).collect();
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("dual loss {initial:.3} -> {final_loss:.3} after {} epochs", out.epochs_run);
    assert!(final_loss < 0.25 * initial, "{final_loss} vs initial {initial}");
}

#[test]
fn four_template_ensemble_matches_best_member() {
    let mut cfg = ExperimentConfig::from_json(include_str!("../../../configs/benchmark.json")).unwrap();
    cfg.templates = TemplateId::VALUE_PROMPTS.to_vec();
    let splits = load_splits(&cfg).unwrap();
    let vocab = experiment_vocabulary(&cfg, &splits).unwrap();
    let trained = train_models(&cfg, &splits, &vocab).unwrap();
    let value_model = trained.values.best();
    let jga = |cfg: &ExperimentConfig, members| {
        evaluate(&predict_split(cfg, value_model, members, &splits.test).unwrap(), &splits.test)
            .unwrap()
            .jga
    };
    let singles: Vec<(TemplateId, f64)> = trained
        .slot_models
        .iter()
        .map(|m| {
            let single = ExperimentConfig {
                templates: vec![m.template],
                ..cfg.clone()
            };
            (m.template, jga(&single, vec![(m.template, &m.model)]))
        })
        .collect();
    let ensemble = jga(&cfg, trained.slot_models.iter().map(|m| (m.template, &m.model)).collect());
    let best = singles.iter().map(|s| s.1).fold(0.0, f64::max);
    println!("single-member JGA {singles:?}, ensemble {ensemble:.3}");
    assert!(ensemble >= best, "ensemble {ensemble} below best member {best}");
}
