//! Allocation-only core of the polarity-illusion harness.
//!
//! Everything here is pure computation over in-memory data: building
//! stimulus preambles from lexical frames, querying a [`LanguageModel`]
//! for top-k next-token log-probabilities, levelwise beam search over
//! three-token continuations, lexicon-driven polarity categorization and
//! the smoothed negative-vs-positive log-probability difference with its
//! per-condition summaries. File formats, model loading and the sweep
//! runner live in the `polarity-harness` crate.
#![no_std]
#![warn(missing_docs)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod beam;
pub mod categorize;
pub mod lm;
pub mod metrics;
pub mod stimuli;
mod sum;

pub use beam::{expand_level, prune, search_top_k, BeamError, BeamParams, BeamResult, Continuation};
pub use categorize::{
    categorize_dc, categorize_npi, categorize_result, detokenize, CategorizeError,
    CategorizedContinuation, FiredRule, LexiconError, PolarityLexicon, Verdict,
};
pub use lm::{
    BackendKind, Checkpoint, LanguageModel, LmError, ModelHandle, NextTokenDistribution,
    ReferenceLm, ReferenceLmBuilder, TokenId,
};
pub use metrics::{
    delta_logprob, group_alignment, summarize_condition, CategoryMass, CiMethod,
    ConditionSummary, MetricsError, PromptResult, Smoothing, SmoothingMode,
};
pub use stimuli::{
    build_dc_conditions, build_npi_conditions, Condition, Family, FrameError, LexicalFrame,
    Polarity, StimulusError, StimulusItem, StimulusSet,
};
pub use sum::NeumaierSum;
