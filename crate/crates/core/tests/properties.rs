mod oracles;

use oracles::{direct_delta, random_table};
use polarity_core::categorize::{categorize_npi, REQUIRED_DC_TERMS, REQUIRED_LICENSOR_TERMS, REQUIRED_NPI_TERMS};
use polarity_core::{
    delta_logprob, summarize_condition, CategorizedContinuation, Checkpoint, CiMethod, Condition,
    Continuation, Family, FiredRule, LanguageModel, Polarity, PolarityLexicon, PromptResult,
    Smoothing, TokenId,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn categorized(probs: &[(f64, bool)]) -> Vec<CategorizedContinuation> {
    probs
        .iter()
        .map(|&(p, negative)| CategorizedContinuation {
            continuation: Continuation {
                tokens: vec![TokenId(0)],
                step_logprobs: vec![p.ln()],
                cum_logprob: p.ln(),
            },
            surface: String::new(),
            category: if negative { Polarity::Negative } else { Polarity::Positive },
            fired_rule: FiredRule::DefaultPositive,
            blocked_by: None,
        })
        .collect()
}

/// Probabilities of disjoint continuations: at most 50 entries summing to at most 1.
fn continuation_masses() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((1e-9f64..1.0, any::<bool>()), 0..50).prop_map(|v| {
        let total: f64 = v.iter().map(|x| x.0).sum();
        let scale = if total > 1.0 { 1.0 / total } else { 1.0 };
        v.into_iter().map(|(p, n)| (p * scale, n)).collect()
    })
}

fn npi_lexicon() -> PolarityLexicon {
    PolarityLexicon::new(Family::Npi, &REQUIRED_NPI_TERMS, &REQUIRED_LICENSOR_TERMS, &[], "t").unwrap()
}

proptest! {
    #[test]
    fn delta_matches_direct_arithmetic(masses in continuation_masses()) {
        let got = delta_logprob(&categorized(&masses), Smoothing::default()).unwrap();
        let neg: Vec<f64> = masses.iter().filter(|m| m.1).map(|m| m.0.ln().exp()).collect();
        let pos: Vec<f64> = masses.iter().filter(|m| !m.1).map(|m| m.0.ln().exp()).collect();
        prop_assert!((got.delta - direct_delta(&neg, &pos, 0.001)).abs() <= 1e-12);
        let bound = 1.001f64.ln() - 0.001f64.ln();
        prop_assert!(got.delta.abs() <= bound + 1e-12);
        prop_assert!(got.negative + got.positive <= 1.0 + 1e-9);
    }

    #[test]
    fn swapping_categories_negates_delta(masses in continuation_masses()) {
        let flipped: Vec<(f64, bool)> = masses.iter().map(|&(p, n)| (p, !n)).collect();
        let a = delta_logprob(&categorized(&masses), Smoothing::default()).unwrap();
        let b = delta_logprob(&categorized(&flipped), Smoothing::default()).unwrap();
        prop_assert_eq!(a.delta, -b.delta);
    }

    #[test]
    fn more_negative_mass_raises_delta(
        masses in continuation_masses(),
        bump in 1e-6f64..1e-2,
    ) {
        let mut neg = masses.clone();
        neg.push((bump, true));
        let base = delta_logprob(&categorized(&masses), Smoothing::default()).unwrap();
        let more = delta_logprob(&categorized(&neg), Smoothing::default()).unwrap();
        prop_assert!(more.delta > base.delta);
    }

    #[test]
    fn summary_mean_equals_arithmetic_mean(deltas in prop::collection::vec(-6.9f64..6.9, 2..100)) {
        let results: Vec<PromptResult> = deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| PromptResult {
                item_id: format!("i{i}"),
                condition: Condition::DcToo,
                model_name: "m".into(),
                checkpoint: Checkpoint::Final,
                sum_prob_negative: 0.0,
                sum_prob_positive: 0.0,
                delta_logprob: d,
                smoothing: Smoothing::default(),
            })
            .collect();
        let s = summarize_condition(&results, CiMethod::Normal).unwrap();
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        prop_assert!((s.mean_delta - mean).abs() <= 1e-12);
        prop_assert!(s.ci95_low <= s.mean_delta && s.mean_delta <= s.ci95_high);
    }

    #[test]
    fn licensor_never_turns_positive_into_negative(
        words in prop::collection::vec("[a-z]{1,8}|ever|any|yet|at all", 1..6),
        licensor in prop::sample::select(REQUIRED_LICENSOR_TERMS.to_vec()),
        at in 0usize..6,
    ) {
        let lex = npi_lexicon();
        let base = words.join(" ");
        let before = categorize_npi(&base, &lex);
        let mut with = words.clone();
        with.insert(at.min(words.len()), licensor.to_string());
        let after = categorize_npi(&with.join(" "), &lex);
        prop_assert_eq!(after.category, Polarity::Positive);
        if before.category == Polarity::Positive {
            prop_assert_eq!(after.category, Polarity::Positive);
        }
    }

    #[test]
    fn matching_ignores_case(surface in "[a-zA-Z ]{0,30}( ever| ANY| At All)?") {
        let lex = npi_lexicon();
        let a = categorize_npi(&surface, &lex);
        let b = categorize_npi(&surface.to_lowercase(), &lex);
        prop_assert_eq!(a.category, b.category);
        prop_assert_eq!(a.category == Polarity::Negative, a.fired_rule != FiredRule::DefaultPositive);
        if let FiredRule::Term(t) = &a.fired_rule {
            prop_assert!(lex.npi_terms().any(|x| x == t));
        }
    }

    #[test]
    fn reference_tables_sum_to_one_and_truncate_monotonically(seed in any::<u64>(), m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng, 7, 2);
        let mut prefix = table.prompt.clone();
        for step in 0..3u32 {
            let full = table.model.full_logprobs(&prefix);
            let total: f64 = full.iter().map(|lp| lp.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            let small = table.model.next_token_logprobs(&prefix, m).unwrap();
            let large = table.model.next_token_logprobs(&prefix, 50).unwrap();
            prop_assert!(small.entries.len() <= m);
            prop_assert_eq!(&large.entries[..small.entries.len()], &small.entries[..]);
            prop_assert!(large.entries.windows(2).all(|w| w[0].1 >= w[1].1));
            prop_assert_eq!(&table.model.next_token_logprobs(&prefix, m).unwrap(), &small);
            prefix.push(TokenId(step % 7));
        }
    }
}

#[test]
fn company_is_not_any() {
    let lex = npi_lexicon();
    assert_eq!(categorize_npi("the company", &lex).category, Polarity::Positive);
    assert_eq!(categorize_npi("any company", &lex).category, Polarity::Negative);
    let dc = PolarityLexicon::new(Family::Dc, &[] as &[&str], &[], &REQUIRED_DC_TERMS, "t").unwrap();
    assert_eq!(dc.version(), "t");
}
