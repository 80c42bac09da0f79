mod common;

use common::data;
use polarity_core::categorize::categorize_surface;
use polarity_core::{Family, Polarity};
use polarity_harness::formats;
use polarity_harness::shipped;

fn entries() -> Vec<formats::GoldenEntry> {
    let path = data("golden/golden.tsv");
    formats::parse_golden(&formats::read_text(&path).unwrap(), &path).unwrap()
}

#[test]
fn shipped_lexicons_agree_with_every_golden_entry() {
    let npi = shipped::lexicon(Family::Npi);
    let dc = shipped::lexicon(Family::Dc);
    let entries = entries();
    assert!(entries.len() >= 200);
    let wrong: Vec<String> = entries
        .iter()
        .filter(|e| {
            let lex = if e.family == Family::Npi { &npi } else { &dc };
            categorize_surface(&e.surface, e.family, lex).category != e.expected
        })
        .map(|e| format!("line {}: {:?}", e.line, e.surface))
        .collect();
    assert!(wrong.is_empty(), "{wrong:#?}");
}

#[test]
fn golden_file_covers_the_tricky_cases() {
    let entries = entries();
    let has = |family: Family, needle: &str, expected: Polarity| {
        entries
            .iter()
            .any(|e| e.family == family && e.surface.contains(needle) && e.expected == expected)
    };
    assert!(has(Family::Npi, "at all", Polarity::Negative));
    assert!(has(Family::Npi, "in weeks", Polarity::Negative));
    assert!(has(Family::Npi, "company", Polarity::Positive));
    assert!(has(Family::Npi, "not", Polarity::Positive));
    assert!(has(Family::Npi, "n't", Polarity::Positive));
    assert!(has(Family::Dc, "missed", Polarity::Negative));
    assert!(has(Family::Dc, "noticed", Polarity::Positive));
    for family in [Family::Npi, Family::Dc] {
        for p in [Polarity::Negative, Polarity::Positive] {
            assert!(entries.iter().filter(|e| e.family == family && e.expected == p).count() >= 20);
        }
    }
}
