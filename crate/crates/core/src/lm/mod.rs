//! Causal language model: tokenization, weighted teacher-forced losses,
//! greedy decoding, sequence scoring and ensemble decoding.

mod checkpoint;
mod ensemble;
mod layout;
mod model;
mod optim;
mod vocab;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use ensemble::{ensemble_decode, ensemble_generate, ensemble_generate_multi, normalize_weights};
pub use layout::{LMConfig, PositionEncoding};
pub use model::{CausalLM, DecodeState};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use vocab::{pieces, TokenId, Vocabulary, BOS, EOA, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// One teacher-forced example: loss is taken over `target` only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub prefix: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub weight: f64,
}

impl TrainItem {
    pub fn new(prefix: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        TrainItem {
            prefix,
            target,
            weight: 1.0,
        }
    }

    pub fn weighted(prefix: Vec<TokenId>, target: Vec<TokenId>, weight: f64) -> Self {
        TrainItem { prefix, target, weight }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

impl TrainBatch {
    pub fn new(items: Vec<TrainItem>) -> Self {
        TrainBatch { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.items.iter().map(|i| i.weight).sum()
    }

    /// Weighted mean objective: item `i` contributes `weight_i / sum(weights)`
    /// to every target token.
    pub fn objective(&self) -> Result<Objective> {
        if let Some(i) = self.items.iter().position(|i| !(i.weight >= 0.0 && i.weight.is_finite())) {
            return Err(Error::InvalidArgument(format!("item {i}: weight must be finite and >= 0")));
        }
        let total = self.total_weight();
        let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
        Ok(Objective {
            sequences: self
                .items
                .iter()
                .map(|it| WeightedSequence::uniform(it.prefix.clone(), it.target.clone(), it.weight * scale))
                .collect(),
        })
    }
}

/// A target sequence with a loss coefficient per target token.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSequence {
    pub prefix: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub weights: Vec<f64>,
}

impl WeightedSequence {
    pub fn uniform(prefix: Vec<TokenId>, target: Vec<TokenId>, weight: f64) -> Self {
        let weights = vec![weight; target.len()];
        WeightedSequence { prefix, target, weights }
    }
}

/// Loss `-sum_seq sum_j weights[j] * log P(target[j] | prefix, target[..j])`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Objective {
    pub sequences: Vec<WeightedSequence>,
}

impl Objective {
    pub fn push(&mut self, seq: WeightedSequence) {
        self.sequences.push(seq);
    }

    pub fn extend(&mut self, other: Objective) {
        self.sequences.extend(other.sequences);
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for s in &mut self.sequences {
            s.weights.iter_mut().for_each(|w| *w *= factor);
        }
        self
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveEval {
    pub loss: f64,
    /// Per sequence, the log-probability of each target token.
    pub logprobs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stepwise_logprobs: Vec<f64>,
}

impl DecodeResult {
    pub fn logprob(&self) -> f64 {
        self.stepwise_logprobs.iter().sum()
    }

    pub fn ended(&self) -> bool {
        self.tokens.last() == Some(&EOA)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Backend boundary for scoring, training and decoding.
pub trait LanguageModel {
    type State: Clone;

    fn vocab(&self) -> &Vocabulary;

    fn context_length(&self) -> usize;

    fn evaluate(&self, obj: &Objective) -> Result<ObjectiveEval>;

    /// One gradient step on `obj`; returns the evaluation before the update.
    fn step(&mut self, obj: &Objective, lr: f64) -> Result<ObjectiveEval>;

    /// Consumes BOS + `prefix` and yields a state holding the next-token
    /// distribution.
    fn start_decode(&self, prefix: &[TokenId]) -> Result<Self::State>;

    fn extend(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<()>;

    fn next_distribution<'a>(&self, state: &'a Self::State) -> &'a [f64];

    /// Positions consumed so far, BOS included.
    fn decoded_len(&self, state: &Self::State) -> usize;

    /// Whether gradient steps are refused.
    fn is_frozen(&self) -> bool {
        false
    }

    fn nll(&self, batch: &TrainBatch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        Ok(self.evaluate(&batch.objective()?)?.loss)
    }

    fn train_step(&mut self, batch: &TrainBatch, lr: f64) -> Result<f64> {
        Ok(self.step(&batch.objective()?, lr)?.loss)
    }

    fn generate(&self, prefix: &[TokenId], max_new: usize) -> Result<DecodeResult> {
        let mut tokens = Vec::new();
        let mut stepwise = Vec::new();
        if max_new > 0 {
            let mut state = self.start_decode(prefix)?;
            loop {
                let probs = self.next_distribution(&state);
                let tok = argmax(probs);
                stepwise.push(probs[tok].ln());
                tokens.push(tok as TokenId);
                if tok as TokenId == EOA
                    || tokens.len() >= max_new
                    || self.decoded_len(&state) >= self.context_length()
                {
                    break;
                }
                self.extend(&mut state, &[tok as TokenId])?;
            }
        }
        let text = self.vocab().decode(&tokens);
        Ok(DecodeResult {
            tokens,
            text,
            stepwise_logprobs: stepwise,
        })
    }

    fn sequence_logprob(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<f64> {
        let obj = Objective {
            sequences: vec![WeightedSequence::uniform(prefix.to_vec(), target.to_vec(), 1.0)],
        };
        Ok(self.evaluate(&obj)?.logprobs[0].iter().sum())
    }

    /// Log-probabilities of many targets after one shared prefix.
    fn sequence_logprobs(&self, prefix: &[TokenId], targets: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let obj = Objective {
            sequences: targets
                .iter()
                .map(|t| WeightedSequence::uniform(prefix.to_vec(), t.clone(), 0.0))
                .collect(),
        };
        Ok(self.evaluate(&obj)?.logprobs.iter().map(|l| l.iter().sum()).collect())
    }
}
