use std::path::Path;

use polarity_harness::formats::{self, BeamRecord, ResultRecord};
use polarity_harness::report::{self, CellResults};
use polarity_harness::sweep::{CellSpec, CellStatus, RunRecord};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = ResultRecord> {
    (
        "[a-z0-9-]{1,12}",
        prop::sample::select(vec!["no", "emb-no", "the"]),
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        0.0f64..=1.0,
        0.0f64..=1.0,
        1e-12f64..1.0,
    )
        .prop_map(|(id, condition, delta, neg, pos, s)| ResultRecord {
            item_id: id,
            family: "npi".into(),
            condition: condition.into(),
            model: "ref:toy".into(),
            checkpoint: "final".into(),
            sum_p_neg: neg,
            sum_p_pos: pos,
            delta_logprob: delta,
            lexicon_version: "v1".into(),
            smoothing: s,
            smoothing_mode: "additive".into(),
        })
}

fn beam() -> impl Strategy<Value = BeamRecord> {
    (
        prop::collection::vec(any::<u32>(), 0..4),
        prop::collection::vec(-1e3f64..0.0, 0..4),
        "\\PC{0,20}",
    )
        .prop_map(|(ids, steps, surface)| BeamRecord {
            item_id: "i".into(),
            condition: "no".into(),
            rank: 1,
            token_ids: ids,
            cum_logprob: steps.iter().sum(),
            step_logprobs: steps,
            surface_text: surface,
            category: "POSITIVE".into(),
            fired_rule: "default-positive".into(),
        })
}

fn cell(rows: Vec<ResultRecord>) -> CellResults {
    CellResults {
        cell: CellSpec {
            model: "ref:toy".into(),
            checkpoint: "final".into(),
            backend: "reference-table".into(),
        },
        record: RunRecord {
            run_id: "r".into(),
            cell: "ref_toy@final".into(),
            model: "ref:toy".into(),
            checkpoint: "final".into(),
            status: CellStatus::Done,
            results_file: None,
            results_sha256: None,
            beams_file: None,
            beams_sha256: None,
            rows: None,
            error: None,
        },
        rows,
    }
}

proptest! {
    #[test]
    fn result_rows_survive_jsonl_exactly(rows in prop::collection::vec(record(), 0..20)) {
        let text = formats::to_jsonl(&rows);
        let back: Vec<ResultRecord> = formats::parse_jsonl(&text, Path::new("t")).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn beam_rows_survive_jsonl_exactly(rows in prop::collection::vec(beam(), 0..10)) {
        let text = formats::to_jsonl(&rows);
        let back: Vec<BeamRecord> = formats::parse_jsonl(&text, Path::new("t")).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn items_tsv_round_trips_exactly(rows in prop::collection::vec(record(), 0..20)) {
        let text = report::items_tsv(&[cell(rows.clone())]);
        let back = report::parse_items_tsv(&text, Path::new("items.tsv")).unwrap();
        prop_assert_eq!(back, rows);
    }
}

#[test]
fn items_tsv_rejects_a_short_row() {
    let text = format!("{}\nx\tnpi\n", report::ITEMS_HEADER.join("\t"));
    let err = report::parse_items_tsv(&text, Path::new("items.tsv")).err().unwrap();
    assert!(err.to_string().contains("items.tsv:2:"), "{err}");
}

#[test]
fn items_tsv_rejects_a_foreign_header() {
    assert!(report::parse_items_tsv("a\tb\n", Path::new("items.tsv")).is_err());
}
