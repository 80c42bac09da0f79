//! Tab-separated exports of a run.
//!
//! * `items.tsv`: one row per prompt result.
//! * `summary.tsv`: one row per (cell, condition) with mean Δlogprob and
//!   its 95% interval; `NA` when a condition has fewer than two items.
//! * `alignment.tsv`: depth-charge group alignment of `no` per cell.
//!
//! Every file starts with a header row. Numbers are written in Rust's
//! shortest round-trip form, so parsing them back is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use polarity_core::{
    group_alignment, summarize_condition, CiMethod, Condition, ConditionSummary, Family, MetricsError, PromptResult,
};

use crate::formats::ResultRecord;
use crate::sweep::{CellSpec, CellStatus, Run, RunRecord, SweepError};

pub const ITEMS_HEADER: [&str; 11] = [
    "item_id",
    "family",
    "condition",
    "model",
    "checkpoint",
    "sum_p_neg",
    "sum_p_pos",
    "delta_logprob",
    "lexicon_version",
    "smoothing",
    "smoothing_mode",
];

pub const SUMMARY_HEADER: [&str; 9] = [
    "family",
    "condition",
    "model",
    "checkpoint",
    "n_items",
    "mean_delta",
    "ci95_low",
    "ci95_high",
    "ci_method",
];

pub const ALIGNMENT_HEADER: [&str; 3] = ["model", "checkpoint", "group_alignment"];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("run {0} has no finished cells")]
    NothingDone(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Table { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("cannot draw the figure: {}", .0.join("; "))]
    Gaps(Vec<String>),
    #[error("plot: {0}")]
    Plot(String),
}

/// A DONE cell and its rows.
pub struct CellResults {
    pub cell: CellSpec,
    pub record: RunRecord,
    pub rows: Vec<ResultRecord>,
}

/// DONE cells in manifest order.
pub fn done_cells(run: &Run) -> Result<Vec<CellResults>, ReportError> {
    let mut out = Vec::new();
    for (cell, record) in run.manifest().cells.iter().zip(run.statuses()?) {
        if record.status == CellStatus::Done {
            let rows = run.load_results(&record)?;
            out.push(CellResults {
                cell: cell.clone(),
                record,
                rows,
            });
        }
    }
    Ok(out)
}

/// Summary of one condition in one cell. `ci` is `None` below two items.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub family: Family,
    pub condition: Condition,
    pub model: String,
    pub checkpoint: String,
    pub n_items: usize,
    pub mean_delta: f64,
    pub ci: Option<(f64, f64)>,
}

impl SummaryRow {
    /// The core summary, when the interval is defined.
    pub fn to_summary(&self) -> Option<ConditionSummary> {
        let (lo, hi) = self.ci?;
        Some(ConditionSummary {
            family: self.family,
            condition: self.condition,
            model_name: self.model.clone(),
            checkpoint: polarity_core::Checkpoint::parse(&self.checkpoint)?,
            n_items: self.n_items,
            mean_delta: self.mean_delta,
            ci95_low: lo,
            ci95_high: hi,
        })
    }
}

fn ci_label(method: CiMethod) -> String {
    match method {
        CiMethod::Normal => "normal".into(),
        CiMethod::Bootstrap { resamples, seed } => format!("bootstrap:{resamples}:{seed}"),
    }
}

/// Per-condition summaries of one cell's prompt results, for every
/// condition of `families` that has at least one row.
pub fn summarize_cell(
    model: &str,
    checkpoint: &str,
    results: &[PromptResult],
    families: &[Family],
    method: CiMethod,
) -> Result<Vec<SummaryRow>, ReportError> {
    let mut rows = Vec::new();
    for &family in families {
        for &condition in family.conditions() {
            let of: Vec<PromptResult> = results.iter().filter(|r| r.condition == condition).cloned().collect();
            let row = match of.len() {
                0 => continue,
                1 => SummaryRow {
                    family,
                    condition,
                    model: model.into(),
                    checkpoint: checkpoint.into(),
                    n_items: 1,
                    mean_delta: of[0].delta_logprob,
                    ci: None,
                },
                _ => {
                    let s = summarize_condition(&of, method)?;
                    SummaryRow {
                        family,
                        condition,
                        model: model.into(),
                        checkpoint: checkpoint.into(),
                        n_items: s.n_items,
                        mean_delta: s.mean_delta,
                        ci: Some((s.ci95_low, s.ci95_high)),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

fn to_prompt_results(cell: &CellResults) -> Result<Vec<PromptResult>, ReportError> {
    cell.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_prompt_result().map_err(|msg| ReportError::Table {
                path: PathBuf::from(cell.record.results_file.clone().unwrap_or_default()),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Summaries of every DONE cell, in manifest order.
pub fn run_summaries(run: &Run) -> Result<Vec<SummaryRow>, ReportError> {
    let families = run.manifest().families();
    let method = run.manifest().ci_method();
    let mut out = Vec::new();
    for cell in done_cells(run)? {
        let results = to_prompt_results(&cell)?;
        out.extend(summarize_cell(&cell.cell.model, &cell.cell.checkpoint, &results, &families, method)?);
    }
    Ok(out)
}

/// Group alignment of the depth-charge `no` condition; `None` when a
/// depth-charge condition lacks an interval.
pub fn alignment_of(rows: &[SummaryRow]) -> Result<Option<f64>, ReportError> {
    let dc: Vec<ConditionSummary> = rows
        .iter()
        .filter(|r| r.family == Family::Dc)
        .filter_map(SummaryRow::to_summary)
        .collect();
    if dc.len() < Family::Dc.conditions().len() {
        return Ok(None);
    }
    Ok(Some(group_alignment(&dc)?))
}

fn tsv_line(out: &mut String, cols: &[&str]) {
    out.push_str(&cols.join("\t"));
    out.push('\n');
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn items_tsv(cells: &[CellResults]) -> String {
    let mut out = String::new();
    tsv_line(&mut out, &ITEMS_HEADER);
    for cell in cells {
        for r in &cell.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                clean(&r.item_id),
                r.family,
                r.condition,
                clean(&r.model),
                r.checkpoint,
                r.sum_p_neg,
                r.sum_p_pos,
                r.delta_logprob,
                clean(&r.lexicon_version),
                r.smoothing,
                r.smoothing_mode
            )
            .expect("write to string");
        }
    }
    out
}

pub fn summary_tsv(rows: &[SummaryRow], method: CiMethod) -> String {
    let mut out = String::new();
    tsv_line(&mut out, &SUMMARY_HEADER);
    let label = ci_label(method);
    for r in rows {
        let (lo, hi) = match r.ci {
            Some((lo, hi)) => (lo.to_string(), hi.to_string()),
            None => ("NA".into(), "NA".into()),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.family,
            r.condition,
            clean(&r.model),
            r.checkpoint,
            r.n_items,
            r.mean_delta,
            lo,
            hi,
            label
        )
        .expect("write to string");
    }
    out
}

/// Files written by [`export`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportFiles {
    pub items: PathBuf,
    pub summary: PathBuf,
    pub alignment: Option<PathBuf>,
    pub cells: usize,
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the tables of every DONE cell to `out`.
pub fn export(run: &Run, out: &Path) -> Result<ExportFiles, ReportError> {
    let cells = done_cells(run)?;
    if cells.is_empty() {
        return Err(ReportError::NothingDone(run.run_id().into()));
    }
    fs::create_dir_all(out).map_err(|source| ReportError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let families = run.manifest().families();
    let method = run.manifest().ci_method();
    let mut all_rows = Vec::new();
    let mut alignment = String::new();
    tsv_line(&mut alignment, &ALIGNMENT_HEADER);
    let mut any_alignment = false;
    for cell in &cells {
        let rows = summarize_cell(
            &cell.cell.model,
            &cell.cell.checkpoint,
            &to_prompt_results(cell)?,
            &families,
            method,
        )?;
        if let Some(a) = alignment_of(&rows)? {
            writeln!(alignment, "{}\t{}\t{a}", clean(&cell.cell.model), cell.cell.checkpoint).expect("write to string");
            any_alignment = true;
        }
        all_rows.extend(rows);
    }
    let files = ExportFiles {
        items: out.join("items.tsv"),
        summary: out.join("summary.tsv"),
        alignment: any_alignment.then(|| out.join("alignment.tsv")),
        cells: cells.len(),
    };
    write(&files.items, &items_tsv(&cells))?;
    write(&files.summary, &summary_tsv(&all_rows, method))?;
    if let Some(p) = &files.alignment {
        write(p, &alignment)?;
    }
    Ok(files)
}

/// Splits a TSV table with the expected header into rows of columns.
pub fn read_tsv(text: &str, path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>, ReportError> {
    let mut lines = text.lines();
    let got: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    if got != header {
        return Err(ReportError::Table {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected header {got:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<String> = line.split('\t').map(String::from).collect();
        if cols.len() != header.len() {
            return Err(ReportError::Table {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("expected {} columns, got {}", header.len(), cols.len()),
            });
        }
        rows.push(cols);
    }
    Ok(rows)
}

/// Parses `items.tsv` back into result records.
pub fn parse_items_tsv(text: &str, path: &Path) -> Result<Vec<ResultRecord>, ReportError> {
    let num = |s: &str, line: usize| {
        s.parse::<f64>().map_err(|e| ReportError::Table {
            path: path.to_path_buf(),
            line,
            msg: format!("`{s}`: {e}"),
        })
    };
    read_tsv(text, path, &ITEMS_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let line = i + 2;
            Ok(ResultRecord {
                item_id: c[0].clone(),
                family: c[1].clone(),
                condition: c[2].clone(),
                model: c[3].clone(),
                checkpoint: c[4].clone(),
                sum_p_neg: num(&c[5], line)?,
                sum_p_pos: num(&c[6], line)?,
                delta_logprob: num(&c[7], line)?,
                lexicon_version: c[8].clone(),
                smoothing: num(&c[9], line)?,
                smoothing_mode: c[10].clone(),
            })
        })
        .collect()
}
