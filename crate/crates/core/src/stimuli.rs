//! Stimulus preambles for the two illusion families.
//!
//! A [`LexicalFrame`] holds the open-class words of one item; the fixed
//! condition templates turn it into three NPI preambles (ending in "have")
//! or eight depth-charge preambles (ending in "be"). Slots store surface
//! forms, so agreement morphology is the frame author's job.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// Illusion family of a stimulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Negative polarity item illusion ("... that no executives misled have ever").
    Npi,
    /// Depth charge illusion ("No detail is too small to be missed").
    Dc,
}

impl Family {
    /// Lowercase tag used in files and on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Npi => "npi",
            Family::Dc => "dc",
        }
    }

    /// Parses `npi` / `dc` (case-insensitive).
    pub fn parse(s: &str) -> Option<Family> {
        if s.eq_ignore_ascii_case("npi") {
            Some(Family::Npi)
        } else if s.eq_ignore_ascii_case("dc") {
            Some(Family::Dc)
        } else {
            None
        }
    }

    /// Conditions of this family in canonical order.
    pub fn conditions(self) -> &'static [Condition] {
        match self {
            Family::Npi => &NPI_CONDITIONS,
            Family::Dc => &DC_CONDITIONS,
        }
    }

    /// Word every preamble of this family ends with.
    pub fn final_word(self) -> &'static str {
        match self {
            Family::Npi => "have",
            Family::Dc => "be",
        }
    }

    /// Slots a frame of this family must fill.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            Family::Npi => &["subject", "rc_subject", "rc_verb"],
            Family::Dc => &["subject", "adjective"],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Polarity of a continuation or of the compositionally expected continuation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    /// Ordinary, non-negative continuation.
    Positive,
    /// NPI without licensor, or a "negative" verb/adjective after a depth-charge preamble.
    Negative,
}

impl Polarity {
    /// Uppercase tag used in files.
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "POSITIVE",
            Polarity::Negative => "NEGATIVE",
        }
    }

    /// Parses `POSITIVE` / `NEGATIVE` (case-insensitive).
    pub fn parse(s: &str) -> Option<Polarity> {
        if s.eq_ignore_ascii_case("positive") {
            Some(Polarity::Positive)
        } else if s.eq_ignore_ascii_case("negative") {
            Some(Polarity::Negative)
        } else {
            None
        }
    }

    /// The opposite polarity.
    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Experimental condition. The NPI family has three, the depth-charge family eight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// "No shareholders that the executives misled have"
    NpiNo,
    /// "The shareholders that no executives misled have"
    NpiEmbNo,
    /// "The shareholders that the executives misled have"
    NpiThe,
    /// "No detail is too small to be"
    DcNo,
    /// "This detail is too small to be"
    DcThis,
    /// "This detail is not too small to be"
    DcThisNot,
    /// "This detail is too small and should be"
    DcToo,
    /// "This detail is too small and should not be"
    DcTooNot,
    /// "Very small details can simply be"
    DcSimply,
    /// "Very small details should usually be"
    DcVery,
    /// "Very small details should usually not be"
    DcVeryNot,
}

const NPI_CONDITIONS: [Condition; 3] = [Condition::NpiNo, Condition::NpiEmbNo, Condition::NpiThe];
const DC_CONDITIONS: [Condition; 8] = [
    Condition::DcNo,
    Condition::DcThis,
    Condition::DcThisNot,
    Condition::DcToo,
    Condition::DcTooNot,
    Condition::DcSimply,
    Condition::DcVery,
    Condition::DcVeryNot,
];

impl Condition {
    /// Family the condition belongs to.
    pub fn family(self) -> Family {
        match self {
            Condition::NpiNo | Condition::NpiEmbNo | Condition::NpiThe => Family::Npi,
            _ => Family::Dc,
        }
    }

    /// Short label, unique within the family.
    pub fn label(self) -> &'static str {
        match self {
            Condition::NpiNo | Condition::DcNo => "no",
            Condition::NpiEmbNo => "emb-no",
            Condition::NpiThe => "the",
            Condition::DcThis => "this",
            Condition::DcThisNot => "this-not",
            Condition::DcToo => "too",
            Condition::DcTooNot => "too-not",
            Condition::DcSimply => "simply",
            Condition::DcVery => "very",
            Condition::DcVeryNot => "very-not",
        }
    }

    /// Looks up a condition by family and label.
    pub fn parse(family: Family, label: &str) -> Option<Condition> {
        family.conditions().iter().copied().find(|c| c.label() == label)
    }

    /// Polarity of the continuation a compositional reading predicts.
    ///
    /// NPI preambles never license an NPI compositionally except in the
    /// matrix `no` condition. Depth-charge grouping: `too`, `simply` and
    /// `very` are negative, everything else positive.
    pub fn expected_polarity(self) -> Polarity {
        match self {
            Condition::NpiNo => Polarity::Negative,
            Condition::NpiEmbNo | Condition::NpiThe => Polarity::Positive,
            Condition::DcToo | Condition::DcSimply | Condition::DcVery => Polarity::Negative,
            Condition::DcNo
            | Condition::DcThis
            | Condition::DcThisNot
            | Condition::DcTooNot
            | Condition::DcVeryNot => Polarity::Positive,
        }
    }

    /// Position in [`Family::conditions`].
    pub fn ordinal(self) -> usize {
        self.family()
            .conditions()
            .iter()
            .position(|c| *c == self)
            .unwrap_or(0)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Problems with a single frame.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    /// A required slot is absent.
    #[error("frame {item_id}: missing slot `{slot}`")]
    MissingSlot {
        /// Frame id.
        item_id: String,
        /// Slot name.
        slot: String,
    },
    /// A required slot is present but blank.
    #[error("frame {item_id}: slot `{slot}` is empty")]
    EmptySlot {
        /// Frame id.
        item_id: String,
        /// Slot name.
        slot: String,
    },
    /// The frame was handed to the builder of the other family.
    #[error("frame {item_id}: expected a {expected} frame, got {found}")]
    WrongFamily {
        /// Frame id.
        item_id: String,
        /// Family the builder needs.
        expected: Family,
        /// Family of the frame.
        found: Family,
    },
    /// The id is blank.
    #[error("frame with empty item id")]
    EmptyId,
}

/// Set-level validation failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StimulusError {
    /// The set has no items at all.
    #[error("no items")]
    NoItems,
    /// A frame could not be expanded.
    #[error(transparent)]
    Frame(#[from] FrameError),
    /// Item ids occurring in more than one frame.
    #[error("duplicate item ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    /// Items whose family differs from the set's.
    #[error("items from the wrong family: {}", .0.join(", "))]
    FamilyMismatch(Vec<String>),
    /// Item ids that do not carry every condition exactly once.
    #[error("items without exactly one preamble per condition: {}", .0.join(", "))]
    ConditionCount(Vec<String>),
    /// Items whose preamble does not end with the family's final word.
    #[error("preambles not ending in the required word: {}", .0.join(", "))]
    BadSuffix(Vec<String>),
}

/// Open-class words of one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexicalFrame {
    /// Illusion family.
    pub family: Family,
    /// Opaque id, unique within a set.
    pub item_id: String,
    /// Slot name to surface form. Hyphenated slot names are accepted and
    /// normalized to underscores.
    pub slots: BTreeMap<String, String>,
    /// Where the frame came from, e.g. `printed` or `reconstructed`.
    pub source: Option<String>,
}

impl LexicalFrame {
    /// Frame with the given slots.
    pub fn new<I, K, V>(family: Family, item_id: impl Into<String>, slots: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let slots = slots
            .into_iter()
            .map(|(k, v)| (normalize_slot_name(&k.into()), v.into()))
            .collect();
        Self {
            family,
            item_id: item_id.into(),
            slots,
            source: None,
        }
    }

    /// Checks that every slot required by the family's templates is filled.
    pub fn validate(&self) -> Result<(), FrameError> {
        if self.item_id.trim().is_empty() {
            return Err(FrameError::EmptyId);
        }
        for slot in self.family.required_slots() {
            self.slot(slot)?;
        }
        if let Some(v) = self.slots.get("subject_plural") {
            if v.trim().is_empty() {
                return Err(FrameError::EmptySlot {
                    item_id: self.item_id.clone(),
                    slot: "subject_plural".into(),
                });
            }
        }
        Ok(())
    }

    fn slot(&self, name: &str) -> Result<&str, FrameError> {
        match self.slots.get(name) {
            None => Err(FrameError::MissingSlot {
                item_id: self.item_id.clone(),
                slot: name.into(),
            }),
            Some(v) if v.trim().is_empty() => Err(FrameError::EmptySlot {
                item_id: self.item_id.clone(),
                slot: name.into(),
            }),
            Some(v) => Ok(v.trim()),
        }
    }

    fn expect_family(&self, expected: Family) -> Result<(), FrameError> {
        if self.family != expected {
            return Err(FrameError::WrongFamily {
                item_id: self.item_id.clone(),
                expected,
                found: self.family,
            });
        }
        Ok(())
    }

    /// Expands the frame into one item per condition of its family.
    pub fn expand(&self) -> Result<Vec<StimulusItem>, FrameError> {
        match self.family {
            Family::Npi => build_npi_conditions(self),
            Family::Dc => build_dc_conditions(self),
        }
    }
}

fn normalize_slot_name(name: &str) -> String {
    name.trim().replace('-', "_")
}

/// One preamble in one condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StimulusItem {
    /// Id of the frame the item was built from.
    pub item_id: String,
    /// Experimental condition.
    pub condition: Condition,
    /// Text presented to the model.
    pub preamble: String,
}

impl StimulusItem {
    /// Family of the item's condition.
    pub fn family(&self) -> Family {
        self.condition.family()
    }

    fn has_valid_suffix(&self) -> bool {
        self.preamble.split_whitespace().last() == Some(self.family().final_word())
    }
}

/// Builds the `no`, `emb-no` and `the` preambles of an NPI frame.
pub fn build_npi_conditions(frame: &LexicalFrame) -> Result<Vec<StimulusItem>, FrameError> {
    frame.expect_family(Family::Npi)?;
    frame.validate()?;
    let subject = frame.slot("subject")?;
    let rc_subject = frame.slot("rc_subject")?;
    let rc_verb = frame.slot("rc_verb")?;
    let item = |condition, preamble| StimulusItem {
        item_id: frame.item_id.clone(),
        condition,
        preamble,
    };
    Ok(alloc::vec![
        item(
            Condition::NpiNo,
            format!("No {subject} that the {rc_subject} {rc_verb} have")
        ),
        item(
            Condition::NpiEmbNo,
            format!("The {subject} that no {rc_subject} {rc_verb} have")
        ),
        item(
            Condition::NpiThe,
            format!("The {subject} that the {rc_subject} {rc_verb} have")
        ),
    ])
}

/// Builds the eight depth-charge preambles of a DC frame.
///
/// The `simply`, `very` and `very-not` templates use the plural subject;
/// `subject_plural` defaults to `subject` + "s" when the frame omits it.
pub fn build_dc_conditions(frame: &LexicalFrame) -> Result<Vec<StimulusItem>, FrameError> {
    frame.expect_family(Family::Dc)?;
    frame.validate()?;
    let subject = frame.slot("subject")?;
    let adjective = frame.slot("adjective")?;
    let plural = match frame.slots.get("subject_plural") {
        Some(p) => p.trim().to_string(),
        None => format!("{subject}s"),
    };
    let texts = [
        (Condition::DcNo, format!("No {subject} is too {adjective} to be")),
        (Condition::DcThis, format!("This {subject} is too {adjective} to be")),
        (
            Condition::DcThisNot,
            format!("This {subject} is not too {adjective} to be"),
        ),
        (
            Condition::DcToo,
            format!("This {subject} is too {adjective} and should be"),
        ),
        (
            Condition::DcTooNot,
            format!("This {subject} is too {adjective} and should not be"),
        ),
        (
            Condition::DcSimply,
            format!("Very {adjective} {plural} can simply be"),
        ),
        (
            Condition::DcVery,
            format!("Very {adjective} {plural} should usually be"),
        ),
        (
            Condition::DcVeryNot,
            format!("Very {adjective} {plural} should usually not be"),
        ),
    ];
    Ok(texts
        .into_iter()
        .map(|(condition, preamble)| StimulusItem {
            item_id: frame.item_id.clone(),
            condition,
            preamble,
        })
        .collect())
}

/// A validated stimulus set of one family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StimulusSet {
    /// Family shared by every item.
    pub family: Family,
    /// Items in frame order, conditions in canonical order within a frame.
    pub items: Vec<StimulusItem>,
    /// Number of distinct item ids.
    pub frame_count: usize,
}

impl StimulusSet {
    /// Expands and validates a list of frames.
    pub fn from_frames(family: Family, frames: &[LexicalFrame]) -> Result<Self, StimulusError> {
        if frames.is_empty() {
            return Err(StimulusError::NoItems);
        }
        let wrong: Vec<String> = frames
            .iter()
            .filter(|f| f.family != family)
            .map(|f| f.item_id.clone())
            .collect();
        if !wrong.is_empty() {
            return Err(StimulusError::FamilyMismatch(wrong));
        }
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for f in frames {
            if !seen.insert(f.item_id.as_str()) {
                dups.insert(f.item_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(StimulusError::DuplicateIds(dups.into_iter().collect()));
        }
        let mut items = Vec::with_capacity(frames.len() * family.conditions().len());
        for f in frames {
            items.extend(f.expand()?);
        }
        Self::from_items(family, items)
    }

    /// Validates already-expanded items (e.g. an exported item file).
    pub fn from_items(family: Family, items: Vec<StimulusItem>) -> Result<Self, StimulusError> {
        if items.is_empty() {
            return Err(StimulusError::NoItems);
        }
        let wrong: BTreeSet<String> = items
            .iter()
            .filter(|i| i.family() != family)
            .map(|i| i.item_id.clone())
            .collect();
        if !wrong.is_empty() {
            return Err(StimulusError::FamilyMismatch(wrong.into_iter().collect()));
        }
        let bad_suffix: BTreeSet<String> = items
            .iter()
            .filter(|i| !i.has_valid_suffix())
            .map(|i| i.item_id.clone())
            .collect();
        if !bad_suffix.is_empty() {
            return Err(StimulusError::BadSuffix(bad_suffix.into_iter().collect()));
        }
        let mut per_id: BTreeMap<&str, Vec<Condition>> = BTreeMap::new();
        for i in &items {
            per_id.entry(i.item_id.as_str()).or_default().push(i.condition);
        }
        let expected = family.conditions();
        let bad: Vec<String> = per_id
            .iter()
            .filter(|(_, conds)| {
                let mut sorted = (*conds).clone();
                sorted.sort();
                sorted != expected
            })
            .map(|(id, _)| (*id).to_string())
            .collect();
        if !bad.is_empty() {
            return Err(StimulusError::ConditionCount(bad));
        }
        let frame_count = per_id.len();
        Ok(Self {
            family,
            items,
            frame_count,
        })
    }

    /// Items of one condition, in set order.
    pub fn condition_items(&self, condition: Condition) -> impl Iterator<Item = &StimulusItem> {
        self.items.iter().filter(move |i| i.condition == condition)
    }
}
