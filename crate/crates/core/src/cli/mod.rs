//! Command-line runner: `synth`, `train`, `tune-values`, `predict`, `eval`,
//! `ablate-w` and `analyze`. Flags override config keys.

pub mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{load_corpus, synth_corpus, value_match_rate, write_corpus, Ontology};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report};
use crate::inference::{read_predictions, write_predictions};
use crate::lm::{encode_checkpoint, load_checkpoint, save_checkpoint};
use crate::prompts::TemplateId;
use crate::value_gen::{scst_tune, write_reward_csv};

use pipeline::{
    digest, experiment_vocabulary, load_models, load_ontology, load_splits, predict_split, slot_checkpoint_name,
    train_models, train_slot_model, train_value_models, checkpoint_files, digests, write_training, ExperimentConfig,
    TUNED_VALUE_CHECKPOINT, VALUE_CHECKPOINT,
};

#[derive(Debug, Parser)]
#[command(name = "dualprompt", version, about = "Dual prompt learning for few-shot dialogue state tracking")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; every other seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Few-shot ratio of training conversations.
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    /// Comma-separated value-prompt templates, e.g. `f1,f2`.
    #[arg(long, global = true)]
    pub templates: Option<String>,
    /// Output directory (output file for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dialogue corpus.
    Synth {
        /// Ontology spec file; the builtin benchmark ontology when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Train slot models and the value generator; write checkpoints.
    Train,
    /// Reward-tune the value generator found in the output directory.
    TuneValues,
    /// Predict belief states for the test split from saved checkpoints.
    Predict,
    /// Score predictions (from saved checkpoints, or a predictions file).
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Sweep the slot-prompt loss weight.
    AblateW {
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.3, 0.5])]
        w: Vec<f64>,
    },
    /// Fraction of gold values found verbatim in the dialogue history.
    Analyze {
        /// Corpus file; the configured training split when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train => "train",
            Command::TuneValues => "tune-values",
            Command::Predict => "predict",
            Command::Eval { .. } => "eval",
            Command::AblateW { .. } => "ablate-w",
            Command::Analyze { .. } => "analyze",
        }
    }
}

/// Config from `--config` (or defaults) with flag overrides applied.
pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(r) = args.ratio {
        cfg.few_shot.ratio = r;
    }
    if let Some(t) = &args.templates {
        cfg.templates = TemplateId::parse_list(t)?;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Seeds {
    few_shot: u64,
    model: u64,
    train: u64,
    value_gen: u64,
    synth: u64,
}

/// Everything needed to reproduce a command's outputs.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seeds: Seeds,
    config: &'a ExperimentConfig,
    outputs: BTreeMap<String, String>,
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, outputs: BTreeMap<String, String>) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seeds: Seeds {
            few_shot: cfg.few_shot.seed,
            model: cfg.model.seed,
            train: cfg.train.seed,
            value_gen: cfg.value_gen.seed,
            synth: cfg.data.synth.seed,
        },
        config: cfg,
        outputs,
    };
    write_json(&cfg.out.join(format!("manifest_{command}.json")), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn cmd_synth(args: &CommonArgs, spec: Option<&Path>, n: usize) -> Result<()> {
    let ontology = match spec {
        Some(p) => Ontology::load(p)?,
        None => match &args.config {
            Some(_) => load_ontology(&resolve_config(args)?.data.synth)?,
            None => crate::corpus::builtin_ontology(),
        },
    };
    let seed = args.seed.unwrap_or(1);
    let out = args
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("synth needs --out FILE".into()))?;
    let corpus = synth_corpus(&ontology, n, seed)?;
    write_corpus(&out, &corpus)?;
    println!("wrote {} conversations to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let vocab = experiment_vocabulary(cfg, &splits)?;
    let trained = train_models(cfg, &splits, &vocab)?;
    let files = checkpoint_files(&trained)?;
    write_training(&cfg.out, &trained, &files)?;
    for m in &trained.slot_models {
        println!(
            "{}: {} epochs, best epoch {}",
            slot_checkpoint_name(m.template),
            m.outcome.epochs_run,
            m.outcome.best_epoch
        );
    }
    write_manifest(cfg, "train", digests(&files))
}

fn cmd_tune_values(cfg: &ExperimentConfig) -> Result<()> {
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let reward_template = if cfg.templates.contains(&cfg.value_gen.reward_template_id) {
        cfg.value_gen.reward_template_id
    } else {
        cfg.templates[0]
    };
    let mut slot = load_checkpoint(&cfg.out.join(slot_checkpoint_name(reward_template)))?;
    slot.freeze();
    let mut value = load_checkpoint(&cfg.out.join(VALUE_CHECKPOINT))?;
    value.unfreeze();
    let mut vcfg = cfg.value_gen.clone();
    vcfg.reward_template_id = reward_template;
    let tuned = scst_tune(value, &slot, &splits.train, &vcfg).map_err(|e| e.in_stage("reward tuning"))?;
    let mut model = tuned.model;
    model.freeze();
    let path = cfg.out.join(TUNED_VALUE_CHECKPOINT);
    save_checkpoint(&model, &path)?;
    write_reward_csv(&cfg.out.join("rewards.csv"), &tuned.rewards)?;
    let outputs = BTreeMap::from([(TUNED_VALUE_CHECKPOINT.to_string(), digest(&encode_checkpoint(&model)?))]);
    write_manifest(cfg, "tune-values", outputs)
}

fn predictions_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("predictions.jsonl")
}

fn cmd_predict(cfg: &ExperimentConfig) -> Result<Vec<crate::inference::Prediction>> {
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let models = load_models(cfg, &cfg.out).map_err(|e| e.in_stage("load checkpoints"))?;
    let preds = predict_split(cfg, &models.value_model, models.members(), &splits.test)?;
    let path = predictions_path(cfg);
    write_predictions(&path, &preds)?;
    let mut outputs = BTreeMap::from([("predictions.jsonl".to_string(), file_digest(&path)?)]);
    outputs.insert("value_model".into(), models.value_checkpoint.clone());
    write_manifest(cfg, "predict", outputs)?;
    Ok(preds)
}

fn cmd_eval(cfg: &ExperimentConfig, predictions: Option<&Path>) -> Result<()> {
    let preds = match predictions {
        Some(p) => read_predictions(p)?,
        None => cmd_predict(cfg)?,
    };
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let rep = report(&preds, &splits.test, &cfg.out.join("report")).map_err(|e| e.in_stage("evaluate"))?;
    println!(
        "JGA {:.4}  slot accuracy {:.4}  turn value accuracy {:.4}  ({} turns)",
        rep.jga, rep.slot_accuracy, rep.turn_value_accuracy, rep.n_turns
    );
    let outputs = BTreeMap::from([("report.json".to_string(), file_digest(&cfg.out.join("report.json"))?)]);
    write_manifest(cfg, "eval", outputs)
}

/// One `(w, JGA)` row per weight; the value generator is shared.
pub fn ablate_w(cfg: &ExperimentConfig, ws: &[f64]) -> Result<Vec<(f64, f64)>> {
    if ws.is_empty() {
        return Err(Error::InvalidArgument("ablate-w needs at least one w".into()));
    }
    let splits = load_splits(cfg).map_err(|e| e.in_stage("load data"))?;
    let vocab = experiment_vocabulary(cfg, &splits)?;
    let mut rows = Vec::with_capacity(ws.len());
    let mut values = None;
    for &w in ws {
        let mut slot_models = Vec::new();
        for &t in &cfg.templates {
            let m = train_slot_model(cfg, &splits, &vocab, t, w).map_err(|e| e.in_stage(format!("train {t} at w={w}")))?;
            slot_models.push(m);
        }
        if values.is_none() {
            let mut vcfg = cfg.clone();
            vcfg.tune = false;
            values = Some(
                train_value_models(&vcfg, &splits, &vocab, &slot_models)
                    .map_err(|e| e.in_stage("train value generator"))?,
            );
        }
        let vm = values.as_ref().expect("trained above");
        let members = slot_models.iter().map(|m| (m.template, &m.model)).collect();
        let preds = predict_split(cfg, vm.best(), members, &splits.test)?;
        rows.push((w, evaluate(&preds, &splits.test)?.jga));
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["w", "jga"]).map_err(io)?;
    for (wv, jga) in rows {
        w.write_record([wv.to_string(), jga.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("{}: malformed row {rec:?}", path.display())))
        };
        rows.push((num(0)?, num(1)?));
    }
    Ok(rows)
}

fn cmd_ablate_w(cfg: &ExperimentConfig, ws: &[f64]) -> Result<()> {
    let rows = ablate_w(cfg, ws)?;
    let path = cfg.out.join("ablate_w.csv");
    write_ablation_csv(&path, &rows)?;
    for (w, jga) in &rows {
        println!("w={w}  JGA {jga:.4}");
    }
    write_manifest(cfg, "ablate-w", BTreeMap::from([("ablate_w.csv".to_string(), file_digest(&path)?)]))
}

fn cmd_analyze(args: &CommonArgs, corpus: Option<&Path>) -> Result<()> {
    let conversations = match corpus {
        Some(p) => load_corpus(p)?,
        None => load_splits(&resolve_config(args)?)?.train,
    };
    let rate = value_match_rate(&conversations)?;
    println!("{}", serde_json::json!({ "conversations": conversations.len(), "value_match_rate": rate }));
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let stage = cli.command.name();
    let result = match &cli.command {
        Command::Synth { spec, n } => cmd_synth(&cli.common, spec.as_deref(), *n),
        Command::Analyze { corpus } => cmd_analyze(&cli.common, corpus.as_deref()),
        cmd => {
            let cfg = resolve_config(&cli.common)?;
            match cmd {
                Command::Train => cmd_train(&cfg),
                Command::TuneValues => cmd_tune_values(&cfg),
                Command::Predict => cmd_predict(&cfg).map(|_| ()),
                Command::Eval { predictions } => cmd_eval(&cfg, predictions.as_deref()),
                Command::AblateW { w } => cmd_ablate_w(&cfg, w),
                Command::Synth { .. } | Command::Analyze { .. } => unreachable!("handled above"),
            }
        }
    };
    result.map_err(|e| match e {
        Error::Stage { .. } | Error::InvalidArgument(_) => e,
        other => other.in_stage(stage),
    })
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
