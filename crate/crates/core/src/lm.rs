//! Language-model interface and the table-driven reference model.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Vocabulary index of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Index into dense per-vocabulary arrays.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Top-k next-token log-probabilities for one prefix.
///
/// Entries are sorted by descending log-probability, ties by ascending
/// token id. Tokens with zero probability are never listed.
#[derive(Clone, Debug, PartialEq)]
pub struct NextTokenDistribution {
    /// Length of the prefix that was scored.
    pub prefix_len: usize,
    /// `(token, natural-log probability)` pairs.
    pub entries: Vec<(TokenId, f64)>,
}

impl NextTokenDistribution {
    /// Selects the top `k` entries of a dense log-probability vector.
    pub fn from_logprobs(prefix_len: usize, logprobs: &[f64], k: usize) -> Self {
        let mut idx: Vec<u32> = (0..logprobs.len() as u32)
            .filter(|&i| logprobs[i as usize] > f64::NEG_INFINITY)
            .collect();
        let order = |a: &u32, b: &u32| {
            logprobs[*b as usize]
                .total_cmp(&logprobs[*a as usize])
                .then(a.cmp(b))
        };
        if idx.len() > k {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(order);
        Self {
            prefix_len,
            entries: idx
                .into_iter()
                .map(|i| (TokenId(i), logprobs[i as usize]))
                .collect(),
        }
    }
}

/// Training checkpoint of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Checkpoint {
    /// Weights after the given number of optimizer steps.
    Step(u64),
    /// The released, fully trained weights.
    Final,
}

impl Checkpoint {
    /// Parses `final`, `main`, `step1000` or `1000`.
    pub fn parse(s: &str) -> Option<Checkpoint> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("final") || s == "main" {
            return Some(Checkpoint::Final);
        }
        let digits = s.strip_prefix("step").unwrap_or(s);
        digits.parse().ok().map(Checkpoint::Step)
    }
}

impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Checkpoint::Step(n) => write!(f, "{n}"),
            Checkpoint::Final => f.write_str("final"),
        }
    }
}

/// Kind of backend behind a [`ModelHandle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackendKind {
    /// A pretrained causal transformer.
    Transformer,
    /// A [`ReferenceLm`] probability table.
    ReferenceTable,
}

impl BackendKind {
    /// Lowercase tag.
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Transformer => "transformer",
            BackendKind::ReferenceTable => "reference-table",
        }
    }
}

/// Identity of an opened model.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelHandle {
    /// Name as given by the user, e.g. `pythia-160m-deduped`.
    pub model_name: String,
    /// Which weights were loaded.
    pub checkpoint: Checkpoint,
    /// Backend kind.
    pub backend: BackendKind,
}

/// Errors reported by a [`LanguageModel`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    /// Tokenization of an empty string was requested.
    #[error("cannot tokenize empty text")]
    EmptyText,
    /// No vocabulary entry covers the text at this byte offset.
    #[error("no token covers the text at byte {0}")]
    Untokenizable(usize),
    /// Prefix longer than the model's context window.
    #[error("prefix of {len} tokens exceeds the context limit of {limit}")]
    ContextOverflow {
        /// Requested prefix length.
        len: usize,
        /// Maximum the model accepts.
        limit: usize,
    },
    /// The backend needs at least one token of context.
    #[error("empty prefix")]
    EmptyPrefix,
    /// `k` must be at least one.
    #[error("k must be at least 1")]
    ZeroK,
    /// Token id outside the vocabulary.
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    /// Inconsistent reference table.
    #[error("invalid reference table: {0}")]
    InvalidTable(String),
    /// Failure inside the backend.
    #[error("backend failure: {0}")]
    Backend(String),
}

/// A causal LM that can report top-k next-token log-probabilities.
pub trait LanguageModel {
    /// Number of tokens in the vocabulary.
    fn vocab_size(&self) -> usize;

    /// Longest prefix accepted by [`LanguageModel::next_token_logprobs`].
    fn context_limit(&self) -> usize;

    /// Detokenized form of a single token.
    fn surface(&self, id: TokenId) -> Result<String, LmError>;

    /// Splits non-empty text into tokens.
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError>;

    /// Inverse of [`LanguageModel::tokenize`]. The default concatenates surfaces.
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, LmError> {
        let mut out = String::new();
        for id in ids {
            out.push_str(&self.surface(*id)?);
        }
        Ok(out)
    }

    /// Top-`k` continuations of `prefix`, deterministic for fixed arguments.
    fn next_token_logprobs(
        &self,
        prefix: &[TokenId],
        k: usize,
    ) -> Result<NextTokenDistribution, LmError>;

    /// Scores several prefixes; backends may batch the forward passes.
    fn next_token_logprobs_batch(
        &self,
        prefixes: &[Vec<TokenId>],
        k: usize,
    ) -> Result<Vec<NextTokenDistribution>, LmError> {
        prefixes
            .iter()
            .map(|p| self.next_token_logprobs(p, k))
            .collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn context_limit(&self) -> usize {
        (**self).context_limit()
    }
    fn surface(&self, id: TokenId) -> Result<String, LmError> {
        (**self).surface(id)
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, LmError> {
        (**self).detokenize(ids)
    }
    fn next_token_logprobs(
        &self,
        prefix: &[TokenId],
        k: usize,
    ) -> Result<NextTokenDistribution, LmError> {
        (**self).next_token_logprobs(prefix, k)
    }
    fn next_token_logprobs_batch(
        &self,
        prefixes: &[Vec<TokenId>],
        k: usize,
    ) -> Result<Vec<NextTokenDistribution>, LmError> {
        (**self).next_token_logprobs_batch(prefixes, k)
    }
}

/// Common argument checks for `next_token_logprobs` implementations.
pub fn check_query(prefix_len: usize, k: usize, limit: usize) -> Result<(), LmError> {
    if k == 0 {
        return Err(LmError::ZeroK);
    }
    if prefix_len > limit {
        return Err(LmError::ContextOverflow {
            len: prefix_len,
            limit,
        });
    }
    Ok(())
}

const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Table-driven language model.
///
/// Each table key is a token sequence; the distribution for a prefix comes
/// from the longest key that is a suffix of the prefix, falling back to
/// the default distribution. Keying on the full prefix therefore scripts
/// exact scenarios, while short keys act as backoff contexts.
///
/// Tokenization is greedy longest-match over the non-empty surfaces.
#[derive(Clone, Debug)]
pub struct ReferenceLm {
    vocab: Vec<String>,
    default: Vec<f64>,
    table: BTreeMap<Vec<TokenId>, Vec<f64>>,
    max_key_len: usize,
    context_limit: usize,
    // surfaces ordered longest first for greedy matching
    match_order: Vec<u32>,
}

/// Builder for [`ReferenceLm`].
#[derive(Clone, Debug)]
pub struct ReferenceLmBuilder {
    vocab: Vec<String>,
    default: Option<Vec<f64>>,
    entries: Vec<(Vec<TokenId>, Vec<f64>)>,
    context_limit: usize,
}

impl ReferenceLmBuilder {
    /// Starts a model over the given token surfaces (id = position).
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            vocab: vocab.into_iter().map(Into::into).collect(),
            default: None,
            entries: Vec::new(),
            context_limit: 2048,
        }
    }

    /// Maximum prefix length.
    pub fn context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit;
        self
    }

    /// Sparse default distribution; unlisted tokens get probability zero.
    pub fn default_probs<I: IntoIterator<Item = (TokenId, f64)>>(mut self, probs: I) -> Self {
        self.default = Some(self.dense(probs));
        self
    }

    /// Dense default distribution indexed by token id.
    pub fn default_dense(mut self, probs: Vec<f64>) -> Self {
        self.default = Some(probs);
        self
    }

    /// Distribution for prefixes ending in `key`.
    pub fn entry<I: IntoIterator<Item = (TokenId, f64)>>(
        mut self,
        key: Vec<TokenId>,
        probs: I,
    ) -> Self {
        let dense = self.dense(probs);
        self.entries.push((key, dense));
        self
    }

    /// Dense variant of [`ReferenceLmBuilder::entry`].
    pub fn entry_dense(mut self, key: Vec<TokenId>, probs: Vec<f64>) -> Self {
        self.entries.push((key, probs));
        self
    }

    fn dense<I: IntoIterator<Item = (TokenId, f64)>>(&self, probs: I) -> Vec<f64> {
        let mut dense = alloc::vec![0.0; self.vocab.len()];
        for (id, p) in probs {
            match dense.get_mut(id.index()) {
                Some(slot) => *slot += p,
                // out-of-range ids are caught in build()
                None => dense.push(f64::NAN),
            }
        }
        dense
    }

    /// Validates the tables and builds the model.
    pub fn build(self) -> Result<ReferenceLm, LmError> {
        let n = self.vocab.len();
        if n == 0 {
            return Err(LmError::InvalidTable("empty vocabulary".into()));
        }
        if n > u32::MAX as usize {
            return Err(LmError::InvalidTable("vocabulary too large".into()));
        }
        let mut seen = BTreeMap::new();
        for (i, s) in self.vocab.iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            if let Some(prev) = seen.insert(s.as_str(), i) {
                return Err(LmError::InvalidTable(format!(
                    "tokens {prev} and {i} share the surface {s:?}"
                )));
            }
        }
        let default = self
            .default
            .ok_or_else(|| LmError::InvalidTable("missing default distribution".into()))?;
        let default = to_logprobs(&default, n, "default")?;
        let mut table = BTreeMap::new();
        let mut max_key_len = 0;
        for (key, probs) in self.entries {
            if let Some(bad) = key.iter().find(|t| t.index() >= n) {
                return Err(LmError::UnknownToken(bad.0));
            }
            let lp = to_logprobs(&probs, n, "entry")?;
            max_key_len = max_key_len.max(key.len());
            if table.insert(key.clone(), lp).is_some() {
                return Err(LmError::InvalidTable(format!("duplicate key {key:?}")));
            }
        }
        let mut match_order: Vec<u32> = (0..n as u32)
            .filter(|&i| !self.vocab[i as usize].is_empty())
            .collect();
        match_order.sort_by(|a, b| {
            self.vocab[*b as usize]
                .len()
                .cmp(&self.vocab[*a as usize].len())
                .then(a.cmp(b))
        });
        Ok(ReferenceLm {
            vocab: self.vocab,
            default,
            table,
            max_key_len,
            context_limit: self.context_limit,
            match_order,
        })
    }
}

fn to_logprobs(probs: &[f64], n: usize, what: &str) -> Result<Vec<f64>, LmError> {
    if probs.len() != n {
        return Err(LmError::InvalidTable(format!(
            "{what} distribution lists {} tokens for a vocabulary of {n}",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LmError::InvalidTable(format!(
            "{what} distribution has probability {p} outside [0, 1]"
        )));
    }
    let total: f64 = probs.iter().copied().collect::<crate::NeumaierSum>().total();
    if libm::fabs(total - 1.0) > PROB_SUM_TOLERANCE {
        return Err(LmError::InvalidTable(format!(
            "{what} distribution sums to {total}, not 1"
        )));
    }
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { libm::log(p) } else { f64::NEG_INFINITY })
        .collect())
}

impl ReferenceLm {
    /// Uniform distribution over `n` single-character tokens `a`, `b`, ...
    pub fn uniform(n: usize) -> Result<Self, LmError> {
        let p = 1.0 / n as f64;
        ReferenceLmBuilder::new(char_vocab(n))
            .default_dense(alloc::vec![p; n])
            .build()
    }

    /// All mass on `target` for every prefix.
    pub fn point_mass(n: usize, target: TokenId) -> Result<Self, LmError> {
        ReferenceLmBuilder::new(char_vocab(n))
            .default_probs([(target, 1.0)])
            .build()
    }

    /// Full log-probability vector the model uses after `prefix`.
    pub fn full_logprobs(&self, prefix: &[TokenId]) -> &[f64] {
        let longest = self.max_key_len.min(prefix.len());
        for len in (1..=longest).rev() {
            if let Some(lp) = self.table.get(&prefix[prefix.len() - len..]) {
                return lp;
            }
        }
        self.table.get(&[][..]).unwrap_or(&self.default)
    }

    /// Token surfaces, indexed by id.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

/// `a`..`z`, then `0`..`9`, then `<n>` placeholders.
fn char_vocab(n: usize) -> Vec<String> {
    const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
    (0..n)
        .map(|i| match ALPHABET.chars().nth(i) {
            Some(c) => String::from(c),
            None => format!("<{i}>"),
        })
        .collect()
}

impl LanguageModel for ReferenceLm {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn surface(&self, id: TokenId) -> Result<String, LmError> {
        self.vocab
            .get(id.index())
            .cloned()
            .ok_or(LmError::UnknownToken(id.0))
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        if text.is_empty() {
            return Err(LmError::EmptyText);
        }
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let hit = self
                .match_order
                .iter()
                .find(|&&i| rest.starts_with(self.vocab[i as usize].as_str()))
                .ok_or(LmError::Untokenizable(text.len() - rest.len()))?;
            rest = &rest[self.vocab[*hit as usize].len()..];
            out.push(TokenId(*hit));
        }
        Ok(out)
    }

    fn next_token_logprobs(
        &self,
        prefix: &[TokenId],
        k: usize,
    ) -> Result<NextTokenDistribution, LmError> {
        check_query(prefix.len(), k, self.context_limit)?;
        if let Some(bad) = prefix.iter().find(|t| t.index() >= self.vocab.len()) {
            return Err(LmError::UnknownToken(bad.0));
        }
        Ok(NextTokenDistribution::from_logprobs(
            prefix.len(),
            self.full_logprobs(prefix),
            k,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(i: u32) -> TokenId {
        TokenId(i)
    }

    fn abc_table() -> ReferenceLm {
        ReferenceLmBuilder::new(["a", "b", "c"])
            .default_probs([(t(0), 0.5), (t(1), 0.3), (t(2), 0.2)])
            .build()
            .unwrap()
    }

    #[test]
    fn uniform_four() {
        let lm = ReferenceLm::uniform(4).unwrap();
        let d = lm.next_token_logprobs(&[], 50).unwrap();
        assert_eq!(d.entries.len(), 4);
        for (i, (id, lp)) in d.entries.iter().enumerate() {
            assert_eq!(id.0 as usize, i, "ties broken by ascending id");
            assert_eq!(*lp, libm::log(0.25));
        }
    }

    #[test]
    fn point_mass_has_zero_logprob() {
        let lm = ReferenceLm::point_mass(5, t(3)).unwrap();
        let d = lm.next_token_logprobs(&[t(1)], 50).unwrap();
        assert_eq!(d.entries, vec![(t(3), 0.0)]);
    }

    #[test]
    fn table_top_two() {
        let d = abc_table().next_token_logprobs(&[t(0)], 2).unwrap();
        assert_eq!(d.entries, vec![(t(0), libm::log(0.5)), (t(1), libm::log(0.3))]);
        assert_eq!(d.prefix_len, 1);
    }

    #[test]
    fn character_tokenization() {
        let lm = abc_table();
        let ids = lm.tokenize("abc").unwrap();
        assert_eq!(ids, vec![t(0), t(1), t(2)]);
        assert_eq!(lm.detokenize(&ids).unwrap(), "abc");
        assert_eq!(lm.tokenize(""), Err(LmError::EmptyText));
        assert_eq!(lm.tokenize("abx"), Err(LmError::Untokenizable(2)));
    }

    #[test]
    fn greedy_longest_match() {
        let lm = ReferenceLmBuilder::new([" ", "h", "a", "v", "e", " have", " ha"])
            .default_dense(vec![1.0 / 7.0; 7])
            .build()
            .unwrap();
        assert_eq!(lm.tokenize(" have").unwrap(), vec![t(5)]);
        assert_eq!(lm.tokenize(" hav").unwrap(), vec![t(6), t(3)]);
    }

    #[test]
    fn longest_suffix_key_wins() {
        let lm = ReferenceLmBuilder::new(["a", "b"])
            .default_probs([(t(0), 1.0)])
            .entry(vec![t(1)], [(t(1), 1.0)])
            .entry(vec![t(0), t(1)], [(t(0), 0.5), (t(1), 0.5)])
            .build()
            .unwrap();
        assert_eq!(lm.full_logprobs(&[t(0)]), &[0.0, f64::NEG_INFINITY]);
        assert_eq!(lm.full_logprobs(&[t(1), t(1)]), &[f64::NEG_INFINITY, 0.0]);
        assert_eq!(
            lm.full_logprobs(&[t(1), t(0), t(1)]),
            &[libm::log(0.5), libm::log(0.5)]
        );
    }

    #[test]
    fn query_errors() {
        let lm = ReferenceLmBuilder::new(["a"])
            .default_probs([(t(0), 1.0)])
            .context_limit(2)
            .build()
            .unwrap();
        assert_eq!(lm.next_token_logprobs(&[t(0)], 0), Err(LmError::ZeroK));
        assert_eq!(
            lm.next_token_logprobs(&[t(0); 3], 1),
            Err(LmError::ContextOverflow { len: 3, limit: 2 })
        );
        assert_eq!(lm.next_token_logprobs(&[t(4)], 1), Err(LmError::UnknownToken(4)));
    }

    #[test]
    fn invalid_tables_rejected() {
        let bad_sum = ReferenceLmBuilder::new(["a", "b"])
            .default_probs([(t(0), 0.5), (t(1), 0.49)])
            .build();
        assert!(matches!(bad_sum, Err(LmError::InvalidTable(_))));
        let bad_id = ReferenceLmBuilder::new(["a"])
            .default_probs([(t(3), 1.0)])
            .build();
        assert!(matches!(bad_id, Err(LmError::InvalidTable(_))));
        let dup = ReferenceLmBuilder::new(["a", "a"])
            .default_dense(vec![0.5, 0.5])
            .build();
        assert!(matches!(dup, Err(LmError::InvalidTable(_))));
        let missing_default = ReferenceLmBuilder::new(["a"]).build();
        assert!(matches!(missing_default, Err(LmError::InvalidTable(_))));
    }

    #[test]
    fn checkpoint_parsing() {
        assert_eq!(Checkpoint::parse("final"), Some(Checkpoint::Final));
        assert_eq!(Checkpoint::parse("step1000"), Some(Checkpoint::Step(1000)));
        assert_eq!(Checkpoint::parse("256"), Some(Checkpoint::Step(256)));
        assert_eq!(Checkpoint::parse("x"), None);
        assert_eq!(alloc::format!("{}", Checkpoint::Step(7)), "7");
    }
}
