//! Stimulus sets and lexicons bundled into the binary.

use std::path::Path;

use polarity_core::{Family, PolarityLexicon, StimulusSet};

use crate::formats;

pub const NPI_STIMULI: &str = include_str!("../../../data/stimuli/npi.jsonl");
pub const DC_STIMULI: &str = include_str!("../../../data/stimuli/dc.jsonl");
pub const NPI_LEXICON: &str = include_str!("../../../data/lexicons/npi.json");
pub const DC_LEXICON: &str = include_str!("../../../data/lexicons/dc.json");

pub fn stimuli_text(family: Family) -> &'static str {
    match family {
        Family::Npi => NPI_STIMULI,
        Family::Dc => DC_STIMULI,
    }
}

pub fn lexicon_text(family: Family) -> &'static str {
    match family {
        Family::Npi => NPI_LEXICON,
        Family::Dc => DC_LEXICON,
    }
}

/// Label used in place of a path for bundled inputs.
pub fn label(family: Family, what: &str) -> String {
    format!("<shipped {family} {what}>")
}

pub fn stimuli(family: Family) -> StimulusSet {
    formats::parse_stimuli(stimuli_text(family), Path::new(&label(family, "stimuli")))
        .expect("shipped stimuli are valid")
        .0
}

pub fn lexicon(family: Family) -> PolarityLexicon {
    formats::parse_lexicon(lexicon_text(family), Path::new(&label(family, "lexicon")))
        .expect("shipped lexicons are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_sets_have_expected_size() {
        let npi = stimuli(Family::Npi);
        assert_eq!((npi.frame_count, npi.items.len()), (72, 216));
        let dc = stimuli(Family::Dc);
        assert_eq!((dc.frame_count, dc.items.len()), (64, 512));
        assert_eq!(npi.items[0].preamble, "No shareholders that the executives misled have");
        assert_eq!(dc.items[1].preamble, "This detail is too small to be");
    }

    #[test]
    fn shipped_lexicons_load() {
        assert_eq!(lexicon(Family::Npi).family(), Family::Npi);
        assert_eq!(lexicon(Family::Dc).version(), "dc-default-1");
    }
}
