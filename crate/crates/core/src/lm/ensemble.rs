//! Lockstep decoding over a weighted mixture of next-token distributions.

use super::{argmax, DecodeResult, LanguageModel, TokenId, EOA};
use crate::error::{Error, Result};

/// Validates mixture weights and rescales them to sum to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no weights given".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidWeights(format!("weights must be finite and >= 0: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights("weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Validates member count, weights and vocabularies; returns normalized weights.
fn check_members<M: LanguageModel>(models: &[&M], weights: &[f64]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one model".into()));
    }
    if weights.len() != models.len() {
        return Err(Error::InvalidWeights(format!("{} models, {} weights", models.len(), weights.len())));
    }
    let alpha = normalize_weights(weights)?;
    let vocab = models[0].vocab();
    if models.iter().skip(1).any(|m| m.vocab() != vocab) {
        return Err(Error::VocabularyMismatch("ensemble members use different vocabularies".into()));
    }
    Ok(alpha)
}

/// Every model decodes from the same prefix.
pub fn ensemble_generate<M: LanguageModel>(
    models: &[&M],
    weights: &[f64],
    prefix: &[TokenId],
    max_new: usize,
) -> Result<DecodeResult> {
    let prefixes = vec![prefix; models.len()];
    ensemble_generate_multi(models, weights, &prefixes, max_new)
}

/// Model `k` conditions on `prefixes[k]`; all members then consume the same
/// chosen token at each step.
pub fn ensemble_generate_multi<M: LanguageModel>(
    models: &[&M],
    weights: &[f64],
    prefixes: &[&[TokenId]],
    max_new: usize,
) -> Result<DecodeResult> {
    if prefixes.len() != models.len() {
        return Err(Error::InvalidArgument(format!("{} models, {} prefixes", models.len(), prefixes.len())));
    }
    check_members(models, weights)?;
    let states = if max_new > 0 {
        models
            .iter()
            .zip(prefixes)
            .map(|(m, p)| m.start_decode(p))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    ensemble_decode(models, weights, states, max_new)
}

/// Continues lockstep decoding from per-member states (an empty state list
/// is allowed only when `max_new` is zero).
pub fn ensemble_decode<M: LanguageModel>(
    models: &[&M],
    weights: &[f64],
    mut states: Vec<M::State>,
    max_new: usize,
) -> Result<DecodeResult> {
    let alpha = check_members(models, weights)?;
    let vocab = models[0].vocab();
    let mut tokens = Vec::new();
    let mut stepwise = Vec::new();
    if max_new > 0 {
        if states.len() != models.len() {
            return Err(Error::InvalidArgument(format!("{} models, {} states", models.len(), states.len())));
        }
        let mut mix = vec![0.0; vocab.len()];
        loop {
            mix.iter_mut().for_each(|p| *p = 0.0);
            for ((m, s), a) in models.iter().zip(&states).zip(&alpha) {
                for (acc, p) in mix.iter_mut().zip(m.next_distribution(s)) {
                    *acc += a * p;
                }
            }
            let tok = argmax(&mix);
            stepwise.push(mix[tok].ln());
            tokens.push(tok as TokenId);
            let full = models
                .iter()
                .zip(&states)
                .any(|(m, s)| m.decoded_len(s) >= m.context_length());
            if tok as TokenId == EOA || tokens.len() >= max_new || full {
                break;
            }
            for (m, s) in models.iter().zip(states.iter_mut()) {
                m.extend(s, &[tok as TokenId])?;
            }
        }
    }
    Ok(DecodeResult {
        text: vocab.decode(&tokens),
        tokens,
        stepwise_logprobs: stepwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{CausalLM, LMConfig, TrainBatch, TrainItem, Vocabulary};

    fn cfg(seed: u64) -> LMConfig {
        LMConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            context_length: 16,
            seed,
            positions: Default::default(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["q a b c d"])
    }

    fn memorized(target: &str, seed: u64) -> CausalLM {
        let mut m = CausalLM::new(cfg(seed), vocab()).unwrap();
        let mut t = m.vocab().encode(target);
        t.push(EOA);
        let batch = TrainBatch::new(vec![TrainItem::new(m.vocab().encode("q"), t)]);
        for _ in 0..150 {
            m.train_step(&batch, 1e-2).unwrap();
        }
        m
    }

    #[test]
    fn copies_of_one_model_match_single_generate() {
        let m = memorized("a b", 1);
        let p = m.vocab().encode("q");
        let single = m.generate(&p, 6).unwrap();
        assert_eq!(ensemble_generate(&[&m], &[1.0], &p, 6).unwrap().tokens, single.tokens);
        let out = ensemble_generate(&[&m, &m, &m], &[0.2, 3.0, 1.0], &p, 6).unwrap();
        assert_eq!(out.tokens, single.tokens);
        for (a, b) in out.stepwise_logprobs.iter().zip(&single.stepwise_logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heavier_member_wins_disagreements() {
        let a = memorized("a b", 2);
        let b = memorized("c d", 3);
        let p = a.vocab().encode("q");
        let out = ensemble_generate(&[&a, &b], &[0.9, 0.1], &p, 6).unwrap();
        // recompute each step's mixture by hand from the members' distributions
        let mut sa = a.start_decode(&p).unwrap();
        let mut sb = b.start_decode(&p).unwrap();
        for &tok in &out.tokens {
            let mix: Vec<f64> = sa.probs().iter().zip(sb.probs()).map(|(x, y)| 0.9 * x + 0.1 * y).collect();
            let best = (0..mix.len()).fold(0, |bi, i| if mix[i] > mix[bi] { i } else { bi });
            assert_eq!(best as TokenId, tok);
            a.extend(&mut sa, &[tok]).unwrap();
            b.extend(&mut sb, &[tok]).unwrap();
        }
        assert_eq!(out.text, a.generate(&p, 6).unwrap().text);
        assert_eq!(out.text, "a b");
    }

    #[test]
    fn rejects_bad_weights_and_vocabularies() {
        let m = memorized("a", 4);
        let p = m.vocab().encode("q");
        for w in [vec![0.0], vec![-1.0], vec![f64::NAN]] {
            assert!(matches!(ensemble_generate(&[&m], &w, &p, 3), Err(Error::InvalidWeights(_))));
        }
        assert!(matches!(ensemble_generate(&[&m, &m], &[1.0], &p, 3), Err(Error::InvalidWeights(_))));
        let other = CausalLM::new(cfg(5), Vocabulary::build(["q a b"])).unwrap();
        assert!(matches!(
            ensemble_generate(&[&m, &other], &[1.0, 1.0], &p, 3),
            Err(Error::VocabularyMismatch(_))
        ));
        assert!(ensemble_generate(&[&m], &[1.0], &p, 0).unwrap().tokens.is_empty());
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let w = normalize_weights(&[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(w, vec![0.25, 0.25, 0.5]);
    }
}
