//! Levelwise beam search over fixed-length continuations.
//!
//! Each level extends every live beam by its `per_level_k` most likely next
//! tokens and then prunes the pooled candidates to `width`, including after
//! the last level. Scores are raw cumulative log-probabilities: no length
//! normalization, no renormalization over the survivors, and end-of-text
//! tokens are ordinary tokens.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::lm::{LanguageModel, LmError, TokenId};

/// Beam search configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamParams {
    /// Beams kept after each level.
    pub width: usize,
    /// Number of generated tokens.
    pub depth: usize,
    /// Next tokens requested per beam and level.
    pub per_level_k: usize,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            width: 50,
            depth: 3,
            per_level_k: 50,
        }
    }
}

impl BeamParams {
    /// Rejects zero-valued parameters.
    pub fn validate(&self) -> Result<(), BeamError> {
        if self.width == 0 || self.depth == 0 || self.per_level_k == 0 {
            return Err(BeamError::InvalidParams(*self));
        }
        Ok(())
    }
}

/// A (possibly partial) continuation and its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Continuation {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each generated token given everything before it.
    pub step_logprobs: Vec<f64>,
    /// Running sum of `step_logprobs`, accumulated left to right.
    pub cum_logprob: f64,
}

impl Continuation {
    /// The empty continuation at log-probability zero.
    pub fn root() -> Self {
        Self {
            tokens: Vec::new(),
            step_logprobs: Vec::new(),
            cum_logprob: 0.0,
        }
    }

    /// Probability of the whole continuation.
    pub fn probability(&self) -> f64 {
        libm::exp(self.cum_logprob)
    }

    fn child(&self, token: TokenId, logprob: f64) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        let mut steps = Vec::with_capacity(self.step_logprobs.len() + 1);
        steps.extend_from_slice(&self.step_logprobs);
        steps.push(logprob);
        Self {
            tokens,
            step_logprobs: steps,
            cum_logprob: self.cum_logprob + logprob,
        }
    }
}

/// Ranking order: higher cumulative log-probability first, then token ids
/// lexicographically ascending.
pub fn rank_order(a: &Continuation, b: &Continuation) -> Ordering {
    b.cum_logprob
        .total_cmp(&a.cum_logprob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Final beams of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Stimulus item the prompt came from.
    pub item_id: String,
    /// At most `params.width` continuations in [`rank_order`].
    pub continuations: Vec<Continuation>,
    /// Parameters used.
    pub params: BeamParams,
}

/// Beam search failures.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BeamError {
    /// A parameter was zero.
    #[error("invalid beam parameters {0:?}")]
    InvalidParams(BeamParams),
    /// `expand_level` got no beams.
    #[error("no beams to expand")]
    NoBeams,
    /// The model failed.
    #[error(transparent)]
    Model(#[from] LmError),
}

/// Extends every beam by its top `per_level_k` next tokens.
///
/// Children are returned grouped by parent, in parent order, each group in
/// the model's ranking order.
pub fn expand_level<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    beams: &[Continuation],
    per_level_k: usize,
) -> Result<Vec<Continuation>, BeamError> {
    if beams.is_empty() {
        return Err(BeamError::NoBeams);
    }
    let prefixes: Vec<Vec<TokenId>> = beams
        .iter()
        .map(|b| {
            let mut p = Vec::with_capacity(prompt.len() + b.tokens.len());
            p.extend_from_slice(prompt);
            p.extend_from_slice(&b.tokens);
            p
        })
        .collect();
    let dists = model.next_token_logprobs_batch(&prefixes, per_level_k)?;
    let mut out = Vec::with_capacity(dists.iter().map(|d| d.entries.len()).sum());
    for (beam, dist) in beams.iter().zip(dists) {
        for (token, lp) in dist.entries.into_iter().take(per_level_k) {
            out.push(beam.child(token, lp));
        }
    }
    Ok(out)
}

/// Keeps the best `width` candidates in [`rank_order`].
pub fn prune(mut candidates: Vec<Continuation>, width: usize) -> Vec<Continuation> {
    candidates.sort_by(rank_order);
    candidates.truncate(width);
    candidates
}

/// Finds the top `width` continuations of `prompt` that are `depth` tokens long.
pub fn search_top_k<M: LanguageModel + ?Sized>(
    model: &M,
    item_id: &str,
    prompt: &[TokenId],
    params: BeamParams,
) -> Result<BeamResult, BeamError> {
    params.validate()?;
    let needed = prompt.len() + params.depth - 1;
    if needed > model.context_limit() {
        return Err(LmError::ContextOverflow {
            len: needed,
            limit: model.context_limit(),
        }
        .into());
    }
    let mut beams = alloc::vec![Continuation::root()];
    for _ in 0..params.depth {
        let children = expand_level(model, prompt, &beams, params.per_level_k)?;
        beams = prune(children, params.width);
        if beams.is_empty() {
            break;
        }
    }
    Ok(BeamResult {
        item_id: item_id.into(),
        continuations: beams,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ReferenceLm, ReferenceLmBuilder};
    use alloc::vec;

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    fn at(cum: f64, tokens: &[u32]) -> Continuation {
        Continuation {
            tokens: tokens.iter().map(|&i| t(i)).collect(),
            step_logprobs: vec![cum],
            cum_logprob: cum,
        }
    }

    #[test]
    fn expand_uniform() {
        let lm = ReferenceLm::uniform(4).unwrap();
        let kids = expand_level(&lm, &[t(0)], &[Continuation::root()], 50).unwrap();
        assert_eq!(kids.len(), 4);
        assert!(kids.iter().all(|c| c.cum_logprob == libm::log(0.25)));
    }

    #[test]
    fn expand_point_mass_keeps_score() {
        let lm = ReferenceLm::point_mass(3, t(1)).unwrap();
        let kids = expand_level(&lm, &[], &[at(-0.5, &[0]), at(-2.0, &[2])], 50).unwrap();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0].cum_logprob, -0.5);
        assert_eq!(kids[1].cum_logprob, -2.0);
        assert_eq!(kids[1].tokens, vec![t(2), t(1)]);
    }

    #[test]
    fn expand_from_nonzero_parent() {
        let lm = ReferenceLmBuilder::new(["a", "b"])
            .default_probs([(t(0), 0.5), (t(1), 0.5)])
            .build()
            .unwrap();
        let parent = Continuation {
            tokens: vec![],
            step_logprobs: vec![],
            cum_logprob: -1.0,
        };
        let kids = expand_level(&lm, &[t(0)], &[parent], 2).unwrap();
        assert_eq!(kids.len(), 2);
        for k in &kids {
            assert_eq!(k.cum_logprob, -1.0 + libm::log(0.5));
        }
    }

    #[test]
    fn expand_requires_beams() {
        let lm = ReferenceLm::uniform(2).unwrap();
        assert_eq!(expand_level(&lm, &[], &[], 1), Err(BeamError::NoBeams));
    }

    #[test]
    fn prune_under_capacity_and_ordering() {
        let four = vec![at(-1.0, &[0]), at(-3.0, &[1]), at(-2.0, &[2]), at(-4.0, &[3])];
        assert_eq!(prune(four, 50).len(), 4);
        let kept = prune(vec![at(-3.0, &[0]), at(-1.0, &[1]), at(-2.0, &[2])], 2);
        let scores: Vec<f64> = kept.iter().map(|c| c.cum_logprob).collect();
        assert_eq!(scores, vec![-1.0, -2.0]);
    }

    #[test]
    fn prune_ties_by_token_sequence() {
        let mut all = Vec::new();
        for a in 0..4u32 {
            for b in 0..4u32 {
                for c in 0..4u32 {
                    all.push(at(-1.0, &[a, b, c]));
                }
            }
        }
        all.reverse();
        let kept = prune(all, 50);
        assert_eq!(kept.len(), 50);
        assert_eq!(kept[0].tokens, vec![t(0), t(0), t(0)]);
        assert_eq!(kept[49].tokens, vec![t(3), t(0), t(1)]);
        assert!(kept.windows(2).all(|w| w[0].tokens < w[1].tokens));
    }

    #[test]
    fn search_point_mass_single_path() {
        let lm = ReferenceLm::point_mass(4, t(2)).unwrap();
        let r = search_top_k(&lm, "x", &[t(0)], BeamParams::default()).unwrap();
        assert_eq!(r.continuations.len(), 1);
        assert_eq!(r.continuations[0].cum_logprob, 0.0);
        assert_eq!(r.continuations[0].tokens, vec![t(2); 3]);
    }

    #[test]
    fn search_uniform_prunes_to_width() {
        let lm = ReferenceLm::uniform(4).unwrap();
        let r = search_top_k(&lm, "x", &[t(0)], BeamParams::default()).unwrap();
        assert_eq!(r.continuations.len(), 50);
        let expected = 3.0 * libm::log(0.25);
        for c in &r.continuations {
            assert!((c.cum_logprob - expected).abs() < 1e-12);
            assert_eq!(c.tokens.len(), 3);
            assert_eq!(c.step_logprobs.len(), 3);
        }
        assert!(r.continuations.windows(2).all(|w| w[0].tokens < w[1].tokens));
    }

    #[test]
    fn search_rejects_bad_params_and_long_prompts() {
        let lm = ReferenceLmBuilder::new(["a"])
            .default_probs([(t(0), 1.0)])
            .context_limit(4)
            .build()
            .unwrap();
        let bad = BeamParams {
            width: 0,
            ..BeamParams::default()
        };
        assert!(matches!(
            search_top_k(&lm, "x", &[t(0)], bad),
            Err(BeamError::InvalidParams(_))
        ));
        assert!(matches!(
            search_top_k(&lm, "x", &[t(0); 3], BeamParams::default()),
            Err(BeamError::Model(LmError::ContextOverflow { len: 5, limit: 4 }))
        ));
        assert!(search_top_k(&lm, "x", &[t(0); 2], BeamParams::default()).is_ok());
    }
}
