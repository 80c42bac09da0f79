//! Polarity categorization of continuations by lexicon lookup.
//!
//! NPI items: a continuation is NEGATIVE when it contains an NPI term and
//! no licensor term. Depth-charge items: NEGATIVE when it contains a
//! "negative" verb or adjective. Everything else is POSITIVE.
//!
//! Matching runs on the detokenized surface, case-insensitively, with
//! whole-word boundaries on both ends of a term; multi-word terms span
//! token boundaries. The clitic "n't" is split off its host before
//! matching, so "haven't" contains the licensor "n't".

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::beam::{BeamResult, Continuation};
use crate::lm::{LanguageModel, LmError};
use crate::stimuli::{Family, Polarity};

/// NPI terms every NPI lexicon must contain.
pub const REQUIRED_NPI_TERMS: [&str; 8] = [
    "ever", "any", "anyone", "anything", "anybody", "in weeks", "at all", "yet",
];
/// Licensor terms every NPI lexicon must contain.
pub const REQUIRED_LICENSOR_TERMS: [&str; 7] =
    ["not", "n't", "no", "never", "none", "nothing", "nobody"];
/// Negative terms every depth-charge lexicon must contain.
pub const REQUIRED_DC_TERMS: [&str; 4] = ["missed", "left out", "ignored", "meaningless"];

#[derive(Clone, Debug, PartialEq, Eq)]
struct Term {
    display: String,
    normalized: String,
}

impl Term {
    fn new(raw: &str) -> Self {
        Self {
            display: raw.trim().to_string(),
            normalized: normalize(raw),
        }
    }
}

/// Versioned term lists for one family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolarityLexicon {
    family: Family,
    npi_terms: Vec<Term>,
    licensor_terms: Vec<Term>,
    dc_negative_terms: Vec<Term>,
    version: String,
}

/// Lexicon construction failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LexiconError {
    /// Version string is blank.
    #[error("lexicon has no version")]
    MissingVersion,
    /// A term is blank after trimming.
    #[error("blank term in {0} list")]
    BlankTerm(&'static str),
    /// Required terms absent from the lists.
    #[error("{family} lexicon lacks required terms: {}", missing.join(", "))]
    MissingRequired {
        /// Lexicon family.
        family: Family,
        /// Absent terms.
        missing: Vec<String>,
    },
}

impl PolarityLexicon {
    /// Builds and validates a lexicon.
    pub fn new<S: AsRef<str>>(
        family: Family,
        npi_terms: &[S],
        licensor_terms: &[S],
        dc_negative_terms: &[S],
        version: &str,
    ) -> Result<Self, LexiconError> {
        if version.trim().is_empty() {
            return Err(LexiconError::MissingVersion);
        }
        let build = |terms: &[S], what: &'static str| -> Result<Vec<Term>, LexiconError> {
            terms
                .iter()
                .map(|t| {
                    let term = Term::new(t.as_ref());
                    if term.normalized.is_empty() {
                        Err(LexiconError::BlankTerm(what))
                    } else {
                        Ok(term)
                    }
                })
                .collect()
        };
        let lex = Self {
            family,
            npi_terms: build(npi_terms, "npi")?,
            licensor_terms: build(licensor_terms, "licensor")?,
            dc_negative_terms: build(dc_negative_terms, "dc_negative")?,
            version: version.trim().to_string(),
        };
        let missing = lex.missing_required();
        if !missing.is_empty() {
            return Err(LexiconError::MissingRequired { family, missing });
        }
        Ok(lex)
    }

    fn missing_required(&self) -> Vec<String> {
        let absent = |required: &[&str], have: &[Term]| -> Vec<String> {
            required
                .iter()
                .filter(|r| !have.iter().any(|t| t.normalized == normalize(r)))
                .map(|r| r.to_string())
                .collect()
        };
        match self.family {
            Family::Npi => {
                let mut m = absent(&REQUIRED_NPI_TERMS, &self.npi_terms);
                m.extend(absent(&REQUIRED_LICENSOR_TERMS, &self.licensor_terms));
                m
            }
            Family::Dc => absent(&REQUIRED_DC_TERMS, &self.dc_negative_terms),
        }
    }

    /// Family the lexicon is meant for.
    pub fn family(&self) -> Family {
        self.family
    }

    /// Version tag recorded with every result.
    pub fn version(&self) -> &str {
        &self.version
    }

    /// NPI terms as written.
    pub fn npi_terms(&self) -> impl Iterator<Item = &str> {
        self.npi_terms.iter().map(|t| t.display.as_str())
    }

    /// Licensor terms as written.
    pub fn licensor_terms(&self) -> impl Iterator<Item = &str> {
        self.licensor_terms.iter().map(|t| t.display.as_str())
    }

    /// Depth-charge negative terms as written.
    pub fn dc_negative_terms(&self) -> impl Iterator<Item = &str> {
        self.dc_negative_terms.iter().map(|t| t.display.as_str())
    }
}

/// Why a verdict came out the way it did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FiredRule {
    /// A lexicon term matched and made the continuation NEGATIVE.
    Term(String),
    /// Nothing made it NEGATIVE.
    DefaultPositive,
}

impl fmt::Display for FiredRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FiredRule::Term(t) => f.write_str(t),
            FiredRule::DefaultPositive => f.write_str("default-positive"),
        }
    }
}

/// Category of one surface string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    /// NEGATIVE iff `fired_rule` is a [`FiredRule::Term`].
    pub category: Polarity,
    /// Rule responsible for the category.
    pub fired_rule: FiredRule,
    /// Licensor that blocked an NPI match, if any.
    pub blocked_by: Option<String>,
}

impl Verdict {
    fn positive(blocked_by: Option<String>) -> Self {
        Self {
            category: Polarity::Positive,
            fired_rule: FiredRule::DefaultPositive,
            blocked_by,
        }
    }

    fn negative(term: &str) -> Self {
        Self {
            category: Polarity::Negative,
            fired_rule: FiredRule::Term(term.to_string()),
            blocked_by: None,
        }
    }
}

/// Lowercases, straightens apostrophes, collapses whitespace and splits
/// the "n't" clitic from its host word.
pub fn normalize(text: &str) -> String {
    let mut flat = String::with_capacity(text.len() + 4);
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !flat.is_empty();
            continue;
        }
        if pending_space {
            flat.push(' ');
            pending_space = false;
        }
        match c {
            '\u{2019}' | '\u{2018}' | '\u{02BC}' => flat.push('\''),
            _ => flat.extend(c.to_lowercase()),
        }
    }
    let mut out = String::with_capacity(flat.len() + 4);
    let mut prev: Option<char> = None;
    for (i, c) in flat.char_indices() {
        if c == 'n' && flat[i..].starts_with("n't") && prev.is_some_and(char::is_alphabetic) {
            out.push(' ');
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Byte offset of the first whole-word occurrence of `term` in `text`.
fn find_whole(text: &str, term: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = text[from..].find(term) {
        let start = from + rel;
        let end = start + term.len();
        let left_ok = text[..start].chars().next_back().is_none_or(|c| !is_word_char(c))
            || !term.chars().next().is_some_and(is_word_char);
        let right_ok = text[end..].chars().next().is_none_or(|c| !is_word_char(c))
            || !term.chars().next_back().is_some_and(is_word_char);
        if left_ok && right_ok {
            return Some(start);
        }
        from = start + text[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Earliest matching term; ties go to the longer term, then list order.
fn first_match<'a>(text: &str, terms: &'a [Term]) -> Option<&'a Term> {
    let mut best: Option<(usize, &Term)> = None;
    for term in terms {
        if let Some(pos) = find_whole(text, &term.normalized) {
            let better = match best {
                None => true,
                Some((bp, bt)) => {
                    pos < bp || (pos == bp && term.normalized.len() > bt.normalized.len())
                }
            };
            if better {
                best = Some((pos, term));
            }
        }
    }
    best.map(|(_, t)| t)
}

/// Whether `term` occurs in `surface` under the categorizer's matching rules.
pub fn contains_term(surface: &str, term: &str) -> bool {
    find_whole(&normalize(surface), &normalize(term)).is_some()
}

/// NPI rule: NEGATIVE iff an NPI term matches and no licensor does.
pub fn categorize_npi(surface: &str, lexicon: &PolarityLexicon) -> Verdict {
    let text = normalize(surface);
    let Some(npi) = first_match(&text, &lexicon.npi_terms) else {
        return Verdict::positive(None);
    };
    match first_match(&text, &lexicon.licensor_terms) {
        Some(licensor) => Verdict::positive(Some(licensor.display.clone())),
        None => Verdict::negative(&npi.display),
    }
}

/// Depth-charge rule: NEGATIVE iff a negative term matches.
pub fn categorize_dc(surface: &str, lexicon: &PolarityLexicon) -> Verdict {
    let text = normalize(surface);
    match first_match(&text, &lexicon.dc_negative_terms) {
        Some(term) => Verdict::negative(&term.display),
        None => Verdict::positive(None),
    }
}

/// Applies the family's rule.
pub fn categorize_surface(surface: &str, family: Family, lexicon: &PolarityLexicon) -> Verdict {
    match family {
        Family::Npi => categorize_npi(surface, lexicon),
        Family::Dc => categorize_dc(surface, lexicon),
    }
}

/// A continuation with its category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorizedContinuation {
    /// The scored continuation.
    pub continuation: Continuation,
    /// Detokenized text, surrounding whitespace trimmed.
    pub surface: String,
    /// Polarity category.
    pub category: Polarity,
    /// Matched term, or `default-positive`.
    pub fired_rule: FiredRule,
    /// Licensor that blocked an NPI, for diagnostics.
    pub blocked_by: Option<String>,
}

/// Categorization failures.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CategorizeError {
    /// Lexicon belongs to the other family.
    #[error("{lexicon} lexicon cannot categorize {items} items")]
    FamilyMismatch {
        /// Family of the items.
        items: Family,
        /// Family of the lexicon.
        lexicon: Family,
    },
    /// A continuation without tokens.
    #[error("empty continuation")]
    EmptyContinuation,
    /// Detokenization failed.
    #[error(transparent)]
    Model(#[from] LmError),
}

/// Surface text of a continuation, leading and trailing whitespace removed.
pub fn detokenize<M: LanguageModel + ?Sized>(
    continuation: &Continuation,
    model: &M,
) -> Result<String, CategorizeError> {
    if continuation.tokens.is_empty() {
        return Err(CategorizeError::EmptyContinuation);
    }
    Ok(model.detokenize(&continuation.tokens)?.trim().to_string())
}

/// Categorizes every continuation of a beam result, preserving order.
pub fn categorize_result<M: LanguageModel + ?Sized>(
    result: &BeamResult,
    family: Family,
    lexicon: &PolarityLexicon,
    model: &M,
) -> Result<Vec<CategorizedContinuation>, CategorizeError> {
    if lexicon.family() != family {
        return Err(CategorizeError::FamilyMismatch {
            items: family,
            lexicon: lexicon.family(),
        });
    }
    result
        .continuations
        .iter()
        .map(|c| {
            let surface = detokenize(c, model)?;
            let verdict = categorize_surface(&surface, family, lexicon);
            Ok(CategorizedContinuation {
                continuation: c.clone(),
                surface,
                category: verdict.category,
                fired_rule: verdict.fired_rule,
                blocked_by: verdict.blocked_by,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ReferenceLmBuilder, TokenId};
    use alloc::vec;

    pub(crate) fn npi_lexicon() -> PolarityLexicon {
        PolarityLexicon::new(
            Family::Npi,
            &REQUIRED_NPI_TERMS,
            &REQUIRED_LICENSOR_TERMS,
            &[],
            "test-1",
        )
        .unwrap()
    }

    fn dc_lexicon(extra: &[&str]) -> PolarityLexicon {
        let mut terms: Vec<&str> = REQUIRED_DC_TERMS.to_vec();
        terms.extend_from_slice(extra);
        PolarityLexicon::new(Family::Dc, &[], &[], &terms, "test-1").unwrap()
    }

    #[test]
    fn npi_examples() {
        let lex = npi_lexicon();
        let v = categorize_npi("ever filed a", &lex);
        assert_eq!(v.category, Polarity::Negative);
        assert_eq!(v.fired_rule, FiredRule::Term("ever".into()));

        let v = categorize_npi("never ever been", &lex);
        assert_eq!(v.category, Polarity::Positive);
        assert_eq!(v.fired_rule, FiredRule::DefaultPositive);
        assert_eq!(v.blocked_by.as_deref(), Some("never"));

        assert_eq!(categorize_npi("filed a suit", &lex).category, Polarity::Positive);
    }

    #[test]
    fn word_boundaries() {
        let lex = npi_lexicon();
        assert_eq!(categorize_npi("sued the company", &lex).category, Polarity::Positive);
        assert_eq!(categorize_npi("however, many", &lex).category, Polarity::Positive);
        assert_eq!(
            categorize_npi("told anyone.", &lex).fired_rule,
            FiredRule::Term("anyone".into())
        );
        assert_eq!(
            categorize_npi("Anything else", &lex).fired_rule,
            FiredRule::Term("anything".into())
        );
    }

    #[test]
    fn multi_word_terms_and_clitics() {
        let lex = npi_lexicon();
        assert_eq!(
            categorize_npi("been paid in  weeks", &lex).fired_rule,
            FiredRule::Term("in weeks".into())
        );
        assert_eq!(
            categorize_npi("at all.", &lex).fired_rule,
            FiredRule::Term("at all".into())
        );
        let v = categorize_npi("haven't yet", &lex);
        assert_eq!(v.category, Polarity::Positive);
        assert_eq!(v.blocked_by.as_deref(), Some("n't"));
        assert_eq!(
            categorize_npi("didn\u{2019}t ever", &lex).category,
            Polarity::Positive
        );
        assert_eq!(normalize("  Haven't   EVER "), "have n't ever");
    }

    #[test]
    fn earliest_longest_term_fires() {
        let lex = npi_lexicon();
        assert_eq!(
            categorize_npi("anyone ever", &lex).fired_rule,
            FiredRule::Term("anyone".into())
        );
    }

    #[test]
    fn dc_examples() {
        let lex = dc_lexicon(&[]);
        let v = categorize_dc("missed by anyone", &lex);
        assert_eq!(v.category, Polarity::Negative);
        assert_eq!(v.fired_rule, FiredRule::Term("missed".into()));
        assert_eq!(categorize_dc("noticed.", &lex).category, Polarity::Positive);
        assert_eq!(
            categorize_dc("overlooked or forgotten", &lex).category,
            Polarity::Positive
        );
        let lex = dc_lexicon(&["overlooked"]);
        assert_eq!(
            categorize_dc("overlooked or forgotten", &lex).fired_rule,
            FiredRule::Term("overlooked".into())
        );
        assert_eq!(categorize_dc("left outside", &lex).category, Polarity::Positive);
        assert_eq!(categorize_dc("LEFT OUT.", &lex).category, Polarity::Negative);
    }

    #[test]
    fn lexicon_validation() {
        let err = PolarityLexicon::new(Family::Npi, &["ever"], &["not"], &[], "v").unwrap_err();
        match err {
            LexiconError::MissingRequired { family, missing } => {
                assert_eq!(family, Family::Npi);
                assert!(missing.contains(&"any".to_string()));
                assert!(missing.contains(&"n't".to_string()));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            PolarityLexicon::new::<&str>(Family::Dc, &[], &[], &REQUIRED_DC_TERMS, " "),
            Err(LexiconError::MissingVersion)
        );
        let mut terms = REQUIRED_DC_TERMS.to_vec();
        terms.push("  ");
        assert_eq!(
            PolarityLexicon::new(Family::Dc, &[], &[], &terms, "v"),
            Err(LexiconError::BlankTerm("dc_negative"))
        );
    }

    #[test]
    fn detokenize_strips_leading_space() {
        let lm = ReferenceLmBuilder::new([" ever", " filed", " a", " at", " all", "."])
            .default_dense(vec![1.0 / 6.0; 6])
            .build()
            .unwrap();
        let c = |ids: &[u32]| Continuation {
            tokens: ids.iter().map(|&i| TokenId(i)).collect(),
            step_logprobs: vec![0.0; ids.len()],
            cum_logprob: 0.0,
        };
        assert_eq!(detokenize(&c(&[0, 1, 2]), &lm).unwrap(), "ever filed a");
        assert_eq!(detokenize(&c(&[3, 4, 5]), &lm).unwrap(), "at all.");
        assert_eq!(detokenize(&c(&[]), &lm), Err(CategorizeError::EmptyContinuation));
    }

    #[test]
    fn result_family_must_match() {
        let lm = ReferenceLmBuilder::new(["a"])
            .default_probs([(TokenId(0), 1.0)])
            .build()
            .unwrap();
        let result = BeamResult {
            item_id: "x".into(),
            continuations: vec![],
            params: Default::default(),
        };
        assert_eq!(
            categorize_result(&result, Family::Dc, &npi_lexicon(), &lm),
            Err(CategorizeError::FamilyMismatch {
                items: Family::Dc,
                lexicon: Family::Npi
            })
        );
    }
}
