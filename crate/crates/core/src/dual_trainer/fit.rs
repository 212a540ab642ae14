//! Epoch loop shared by all trainers: seeded shuffling of groups, one gradient
//! step per batch, early stopping on a held-out score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, Objective};

const HOLDOUT_STREAM: u64 = 0x686f_6c64;

/// One term of a composite loss: `coef * objective`.
#[derive(Clone, Debug)]
pub struct Part {
    pub objective: Objective,
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Unweighted loss of every part.
    pub parts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub epoch: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub history: Vec<StepRecord>,
    pub dev: Vec<DevRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Concatenates parts with their coefficients; zero-coefficient parts are dropped.
pub fn combine(parts: &[Part]) -> Objective {
    let mut obj = Objective::default();
    for p in parts.iter().filter(|p| p.coef != 0.0) {
        obj.extend(p.objective.clone().scaled(p.coef));
    }
    obj
}

fn part_loss(obj: &Objective, logprobs: &[Vec<f64>]) -> f64 {
    -obj.sequences
        .iter()
        .zip(logprobs)
        .map(|(s, lp)| s.weights.iter().zip(lp).map(|(w, l)| w * l).sum::<f64>())
        .sum::<f64>()
}

/// Evaluates each part separately; returns `(sum coef * loss, losses)`.
pub fn evaluate_parts<M: LanguageModel>(model: &M, parts: &[Part]) -> Result<(f64, Vec<f64>)> {
    let mut losses = Vec::with_capacity(parts.len());
    let mut total = 0.0;
    for p in parts {
        let l = if p.objective.is_empty() {
            0.0
        } else {
            model.evaluate(&p.objective)?.loss
        };
        total += p.coef * l;
        losses.push(l);
    }
    Ok((total, losses))
}

/// Moves `floor(frac * n)` randomly chosen groups into a held-out set.
pub fn split_holdout<G>(groups: Vec<G>, frac: f64, seed: u64) -> (Vec<G>, Vec<G>) {
    let n = groups.len();
    let k = (frac * n as f64).floor() as usize;
    if k == 0 || k >= n {
        return (groups, Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ HOLDOUT_STREAM));
    let mut is_dev = vec![false; n];
    for &i in &idx[..k] {
        is_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (g, d) in groups.into_iter().zip(is_dev) {
        if d {
            dev.push(g)
        } else {
            train.push(g)
        }
    }
    (train, dev)
}

/// Trains with the summed loss of `build`'s parts as the early-stopping score.
/// `build` receives the current model and the groups of one batch.
pub fn fit<M, G, S, B>(model: &mut M, train: &[G], dev: &[G], cfg: &FitConfig, size: S, build: &B) -> Result<FitOutcome>
where
    M: LanguageModel + Clone,
    S: Fn(&G) -> usize,
    B: Fn(&M, &[&G]) -> Result<Vec<Part>>,
{
    let dev_refs: Vec<&G> = dev.iter().collect();
    let mut score = |m: &M| -> Result<f64> { Ok(evaluate_parts(m, &build(m, &dev_refs)?)?.0) };
    fit_with(model, train, !dev.is_empty(), cfg, size, build, &mut score)
}

/// General loop: `score` is evaluated before training and after every epoch
/// (lower is better) when `use_dev` is set; the best-scoring snapshot wins.
pub fn fit_with<M, G, S, B, F>(
    model: &mut M,
    train: &[G],
    use_dev: bool,
    cfg: &FitConfig,
    size: S,
    build: &B,
    score: &mut F,
) -> Result<FitOutcome>
where
    M: LanguageModel + Clone,
    S: Fn(&G) -> usize,
    B: Fn(&M, &[&G]) -> Result<Vec<Part>>,
    F: FnMut(&M) -> Result<f64>,
{
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet("no training groups".into()));
    }
    if cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::InvalidArgument("batch_size and patience must be >= 1".into()));
    }
    let mut outcome = FitOutcome::default();
    if cfg.max_epochs == 0 {
        return Ok(outcome);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, M)> = None;
    if use_dev {
        let s = score(model)?;
        outcome.dev.push(DevRecord { epoch: 0, score: s });
        best = Some((s, model.clone()));
    }
    let mut bad = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut n = 0;
            while end < order.len() && n < cfg.batch_size {
                n += size(&train[order[end]]);
                end += 1;
            }
            let groups: Vec<&G> = order[start..end].iter().map(|&i| &train[i]).collect();
            start = end;
            let parts = build(model, &groups)?;
            // Parts excluded from the gradient are still scored for the log.
            let mut silent = Vec::new();
            for p in parts.iter().filter(|p| p.coef == 0.0 && !p.objective.is_empty()) {
                silent.push(model.evaluate(&p.objective)?.loss);
            }
            let obj = combine(&parts);
            let eval = if obj.is_empty() { None } else { Some(model.step(&obj, cfg.lr)?) };
            let mut losses = Vec::with_capacity(parts.len());
            let mut offset = 0;
            let mut silent = silent.into_iter();
            for p in &parts {
                if p.objective.is_empty() {
                    losses.push(0.0);
                } else if p.coef == 0.0 {
                    losses.push(silent.next().expect("scored above"));
                } else {
                    let len = p.objective.sequences.len();
                    let lp = &eval.as_ref().expect("non-empty objective").logprobs[offset..offset + len];
                    losses.push(part_loss(&p.objective, lp));
                    offset += len;
                }
            }
            let loss: f64 = parts.iter().zip(&losses).map(|(p, l)| p.coef * l).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { loss, step });
            }
            step += 1;
            outcome.history.push(StepRecord {
                step,
                epoch,
                loss,
                parts: losses,
            });
        }
        outcome.epochs_run = epoch;
        if let Some((best_score, best_model)) = best.as_mut() {
            let s = score(model)?;
            outcome.dev.push(DevRecord { epoch, score: s });
            if s < *best_score {
                *best_score = s;
                *best_model = model.clone();
                outcome.best_epoch = epoch;
                bad = 0;
            } else {
                bad += 1;
                if bad >= cfg.patience {
                    break;
                }
            }
        } else {
            outcome.best_epoch = epoch;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(outcome)
}
