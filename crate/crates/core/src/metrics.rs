//! Δlogprob per prompt and per-condition summaries.
//!
//! For one prompt, the probabilities of all NEGATIVE continuations and of
//! all POSITIVE continuations are summed separately, smoothed, and the
//! difference of their natural logs is reported:
//!
//! ```text
//! Δ = ln(P_neg + s) − ln(P_pos + s)
//! ```
//!
//! Positive values mean the model prefers negative continuations.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::categorize::CategorizedContinuation;
use crate::lm::Checkpoint;
use crate::stimuli::{Condition, Family, Polarity};
use crate::sum::NeumaierSum;

/// When the smoothing constant is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothingMode {
    /// Always add the constant to both sums.
    Additive,
    /// Add it only to a sum that is exactly zero.
    ZeroOnly,
}

impl SmoothingMode {
    /// Tag used in configs and records.
    pub fn as_str(self) -> &'static str {
        match self {
            SmoothingMode::Additive => "additive",
            SmoothingMode::ZeroOnly => "zero-only",
        }
    }

    /// Parses `additive` / `zero-only`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "additive" => Some(SmoothingMode::Additive),
            "zero-only" | "zero_only" => Some(SmoothingMode::ZeroOnly),
            _ => None,
        }
    }
}

/// Smoothing constant and mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothing {
    /// Constant added before taking logs.
    pub value: f64,
    /// When it is added.
    pub mode: SmoothingMode,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            value: 0.001,
            mode: SmoothingMode::Additive,
        }
    }
}

impl Smoothing {
    fn apply(&self, mass: f64) -> f64 {
        match self.mode {
            SmoothingMode::Additive => mass + self.value,
            SmoothingMode::ZeroOnly if mass == 0.0 => self.value,
            SmoothingMode::ZeroOnly => mass,
        }
    }

    /// Smoothed log difference of two category masses.
    pub fn log_ratio(&self, negative: f64, positive: f64) -> f64 {
        libm::log(self.apply(negative)) - libm::log(self.apply(positive))
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if !(self.value.is_finite() && self.value > 0.0) {
            return Err(MetricsError::InvalidSmoothing(self.value));
        }
        Ok(())
    }
}

/// Metric failures.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    /// Smoothing must be a positive finite number.
    #[error("smoothing must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    /// Fewer than two items for a confidence interval.
    #[error("need at least 2 prompt results for a confidence interval, got {0}")]
    InsufficientData(usize),
    /// Results from different conditions or cells were mixed.
    #[error("results do not share one condition, model and checkpoint")]
    MixedResults,
    /// Depth-charge conditions missing from a group comparison.
    #[error("missing conditions: {}", .0.join(", "))]
    MissingConditions(Vec<String>),
    /// A condition appears more than once in a group comparison.
    #[error("condition {0} summarized more than once")]
    DuplicateCondition(String),
    /// Group comparison requires depth-charge summaries.
    #[error("group alignment needs depth-charge summaries")]
    NotDepthCharge,
    /// Bootstrap needs at least one resample.
    #[error("bootstrap needs at least one resample")]
    NoResamples,
}

/// Summed category probabilities and their smoothed log difference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryMass {
    /// Total probability of NEGATIVE continuations.
    pub negative: f64,
    /// Total probability of POSITIVE continuations.
    pub positive: f64,
    /// Smoothed log difference.
    pub delta: f64,
}

/// Sums continuation probabilities per category and takes the smoothed log difference.
pub fn delta_logprob(
    categorized: &[CategorizedContinuation],
    smoothing: Smoothing,
) -> Result<CategoryMass, MetricsError> {
    smoothing.validate()?;
    let mut negative = NeumaierSum::new();
    let mut positive = NeumaierSum::new();
    for c in categorized {
        let p = c.continuation.probability();
        match c.category {
            Polarity::Negative => negative.add(p),
            Polarity::Positive => positive.add(p),
        }
    }
    let (negative, positive) = (negative.total(), positive.total());
    Ok(CategoryMass {
        negative,
        positive,
        delta: smoothing.log_ratio(negative, positive),
    })
}

/// Outcome for one stimulus item in one model cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptResult {
    /// Stimulus item id.
    pub item_id: String,
    /// Condition of the item.
    pub condition: Condition,
    /// Model name.
    pub model_name: String,
    /// Checkpoint.
    pub checkpoint: Checkpoint,
    /// Summed NEGATIVE probability.
    pub sum_prob_negative: f64,
    /// Summed POSITIVE probability.
    pub sum_prob_positive: f64,
    /// Smoothed log difference.
    pub delta_logprob: f64,
    /// Smoothing used.
    pub smoothing: Smoothing,
}

impl PromptResult {
    /// Computes the result for one categorized beam.
    pub fn from_categorized(
        item_id: &str,
        condition: Condition,
        model_name: &str,
        checkpoint: Checkpoint,
        categorized: &[CategorizedContinuation],
        smoothing: Smoothing,
    ) -> Result<Self, MetricsError> {
        let mass = delta_logprob(categorized, smoothing)?;
        Ok(Self {
            item_id: item_id.into(),
            condition,
            model_name: model_name.into(),
            checkpoint,
            sum_prob_negative: mass.negative,
            sum_prob_positive: mass.positive,
            delta_logprob: mass.delta,
            smoothing,
        })
    }
}

/// How the 95% interval is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CiMethod {
    /// mean ± 1.96 · sd / √n.
    Normal,
    /// Percentile bootstrap of the mean.
    Bootstrap {
        /// Number of resamples.
        resamples: usize,
        /// RNG seed.
        seed: u64,
    },
}

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Mean Δlogprob of one condition in one (model, checkpoint) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary {
    /// Family.
    pub family: Family,
    /// Condition.
    pub condition: Condition,
    /// Model name.
    pub model_name: String,
    /// Checkpoint.
    pub checkpoint: Checkpoint,
    /// Number of prompts.
    pub n_items: usize,
    /// Mean Δlogprob.
    pub mean_delta: f64,
    /// Lower 95% bound.
    pub ci95_low: f64,
    /// Upper 95% bound.
    pub ci95_high: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().copied().collect::<NeumaierSum>().total() / values.len() as f64
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    let ss: NeumaierSum = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    libm::sqrt(ss.total() / (values.len() - 1) as f64)
}

/// Mean and 95% interval over the prompts of one condition and cell.
pub fn summarize_condition(
    results: &[PromptResult],
    method: CiMethod,
) -> Result<ConditionSummary, MetricsError> {
    if results.len() < 2 {
        return Err(MetricsError::InsufficientData(results.len()));
    }
    let first = &results[0];
    if results.iter().any(|r| {
        r.condition != first.condition
            || r.model_name != first.model_name
            || r.checkpoint != first.checkpoint
    }) {
        return Err(MetricsError::MixedResults);
    }
    let deltas: Vec<f64> = results.iter().map(|r| r.delta_logprob).collect();
    let m = mean(&deltas);
    let (low, high) = match method {
        CiMethod::Normal => {
            let half = Z_95 * sample_sd(&deltas, m) / libm::sqrt(deltas.len() as f64);
            (m - half, m + half)
        }
        CiMethod::Bootstrap { resamples, seed } => bootstrap_interval(&deltas, m, resamples, seed)?,
    };
    Ok(ConditionSummary {
        family: first.condition.family(),
        condition: first.condition,
        model_name: first.model_name.clone(),
        checkpoint: first.checkpoint,
        n_items: deltas.len(),
        mean_delta: m,
        ci95_low: low,
        ci95_high: high,
    })
}

/// Percentile bootstrap; the interval is widened to contain the sample mean.
fn bootstrap_interval(
    values: &[f64],
    sample_mean: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if resamples == 0 {
        return Err(MetricsError::NoResamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: NeumaierSum = (0..n).map(|_| values[rng.gen_range(0..n)]).collect();
            s.total() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        let pos = libm::round(q * (resamples - 1) as f64) as usize;
        means[pos.min(resamples - 1)]
    };
    Ok((pick(0.025).min(sample_mean), pick(0.975).max(sample_mean)))
}

/// Distance of the depth-charge `no` condition from the positive group minus
/// its distance from the negative group.
///
/// The positive group is `this`, `this-not`, `too-not` and `very-not`; the
/// negative group `too`, `simply` and `very`. Each group's location is the
/// mean of its condition means. Positive values: `no` sits closer to the
/// negative conditions (illusion present).
pub fn group_alignment(summaries: &[ConditionSummary]) -> Result<f64, MetricsError> {
    let mut means: [Option<f64>; 8] = [None; 8];
    let Some(first) = summaries.first() else {
        return Err(MetricsError::MissingConditions(labels(Family::Dc.conditions())));
    };
    for s in summaries {
        if s.family != Family::Dc {
            return Err(MetricsError::NotDepthCharge);
        }
        if s.model_name != first.model_name || s.checkpoint != first.checkpoint {
            return Err(MetricsError::MixedResults);
        }
        let slot = &mut means[s.condition.ordinal()];
        if slot.is_some() {
            return Err(MetricsError::DuplicateCondition(s.condition.label().into()));
        }
        *slot = Some(s.mean_delta);
    }
    let missing: Vec<Condition> = Family::Dc
        .conditions()
        .iter()
        .copied()
        .filter(|c| means[c.ordinal()].is_none())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingConditions(labels(&missing)));
    }
    let get = |c: Condition| means[c.ordinal()].unwrap_or(f64::NAN);
    let group_mean = |conds: &[Condition]| -> f64 {
        let vals: Vec<f64> = conds.iter().map(|c| get(*c)).collect();
        mean(&vals)
    };
    let no = get(Condition::DcNo);
    let positive = group_mean(&[
        Condition::DcThis,
        Condition::DcThisNot,
        Condition::DcTooNot,
        Condition::DcVeryNot,
    ]);
    let negative = group_mean(&[Condition::DcToo, Condition::DcSimply, Condition::DcVery]);
    Ok(libm::fabs(no - positive) - libm::fabs(no - negative))
}

fn labels(conds: &[Condition]) -> Vec<String> {
    conds.iter().map(|c| c.label().into()).collect()
}
