//! One prompt through the whole pipeline: tokenize, beam search,
//! categorize, Δlogprob.

use polarity_core::{
    categorize_result, search_top_k, BeamError, BeamParams, CategorizeError, Checkpoint, LanguageModel, LmError,
    MetricsError, PolarityLexicon, PromptResult, Smoothing, StimulusItem,
};

use crate::formats::{BeamRecord, ResultRecord};

/// Settings shared by every prompt of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalSettings {
    pub beam: BeamParams,
    pub smoothing: Smoothing,
    /// Append a space to the preamble before tokenizing.
    pub trailing_space: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("item {item}: {source}")]
    Tokenize {
        item: String,
        #[source]
        source: LmError,
    },
    #[error("item {item}: {source}")]
    Beam {
        item: String,
        #[source]
        source: BeamError,
    },
    #[error("item {item}: {source}")]
    Categorize {
        item: String,
        #[source]
        source: CategorizeError,
    },
    #[error("item {item}: {source}")]
    Metrics {
        item: String,
        #[source]
        source: MetricsError,
    },
}

/// Text handed to the tokenizer.
pub fn prompt_text(item: &StimulusItem, trailing_space: bool) -> String {
    if trailing_space {
        format!("{} ", item.preamble)
    } else {
        item.preamble.clone()
    }
}

/// Result and ranked continuations of one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemOutcome {
    pub result: PromptResult,
    pub beams: Vec<BeamRecord>,
}

impl ItemOutcome {
    pub fn record(&self, lexicon_version: &str) -> ResultRecord {
        ResultRecord::new(&self.result, lexicon_version)
    }
}

pub fn evaluate_item<M: LanguageModel + ?Sized>(
    lm: &M,
    model_name: &str,
    checkpoint: Checkpoint,
    item: &StimulusItem,
    lexicon: &PolarityLexicon,
    settings: &EvalSettings,
) -> Result<ItemOutcome, EvalError> {
    let id = || format!("{}/{}", item.item_id, item.condition);
    let prompt = lm
        .tokenize(&prompt_text(item, settings.trailing_space))
        .map_err(|source| EvalError::Tokenize { item: id(), source })?;
    let beams = search_top_k(lm, &item.item_id, &prompt, settings.beam)
        .map_err(|source| EvalError::Beam { item: id(), source })?;
    let family = item.condition.family();
    let categorized = categorize_result(&beams, family, lexicon, lm)
        .map_err(|source| EvalError::Categorize { item: id(), source })?;
    let result = PromptResult::from_categorized(
        &item.item_id,
        item.condition,
        model_name,
        checkpoint,
        &categorized,
        settings.smoothing,
    )
    .map_err(|source| EvalError::Metrics { item: id(), source })?;
    let beams = categorized
        .iter()
        .enumerate()
        .map(|(rank, c)| BeamRecord {
            item_id: item.item_id.clone(),
            condition: item.condition.label().into(),
            rank: rank + 1,
            token_ids: c.continuation.tokens.iter().map(|t| t.0).collect(),
            surface_text: c.surface.clone(),
            step_logprobs: c.continuation.step_logprobs.clone(),
            cum_logprob: c.continuation.cum_logprob,
            category: c.category.as_str().into(),
            fired_rule: c.fired_rule.to_string(),
        })
        .collect();
    Ok(ItemOutcome { result, beams })
}
