//! File formats: stimulus frames, item files, lexicons, golden files,
//! reference tables, result records and beam exports.
//!
//! Line-delimited files are one JSON object per line. Blank lines are
//! skipped; anything else that fails to parse is reported with its line
//! number.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use polarity_core::{
    Checkpoint, Condition, Family, LexicalFrame, LexiconError, LmError, Polarity, PolarityLexicon,
    PromptResult, ReferenceLm, ReferenceLmBuilder, Smoothing, SmoothingMode, StimulusError,
    StimulusItem, StimulusSet, TokenId,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {source}", path.display())]
    Stimulus {
        path: PathBuf,
        #[source]
        source: StimulusError,
    },
    #[error("{}: {source}", path.display())]
    Lexicon {
        path: PathBuf,
        #[source]
        source: LexiconError,
    },
    #[error("{}: {source}", path.display())]
    Table {
        path: PathBuf,
        #[source]
        source: LmError,
    },
}

impl FormatError {
    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        FormatError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| FormatError::parse(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn parse_family(s: &str, path: &Path, line: usize) -> Result<Family, FormatError> {
    Family::parse(s).ok_or_else(|| FormatError::parse(path, line, format!("unknown family `{s}`")))
}

/// One line of a frame file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub item_id: String,
    pub family: String,
    pub slots: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// One line of an expanded item file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item_id: String,
    pub family: String,
    pub condition: String,
    pub preamble: String,
}

/// Which of the two stimulus layouts a file uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StimulusLayout {
    Frames,
    Items,
}

/// Parses a frame file or an item file, telling them apart by the first
/// record's keys, and validates the resulting set.
pub fn parse_stimuli(text: &str, path: &Path) -> Result<(StimulusSet, StimulusLayout), FormatError> {
    let first = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| FormatError::Stimulus {
            path: path.to_path_buf(),
            source: StimulusError::NoItems,
        })?;
    let probe: serde_json::Value =
        serde_json::from_str(first.1).map_err(|e| FormatError::parse(path, first.0 + 1, e.to_string()))?;
    let wrap = |source| FormatError::Stimulus {
        path: path.to_path_buf(),
        source,
    };
    if probe.get("preamble").is_some() {
        let (family, items) = parse_items(text, path)?;
        Ok((StimulusSet::from_items(family, items).map_err(wrap)?, StimulusLayout::Items))
    } else {
        let (family, frames) = parse_frames(text, path)?;
        Ok((StimulusSet::from_frames(family, &frames).map_err(wrap)?, StimulusLayout::Frames))
    }
}

pub fn load_stimuli(path: &Path) -> Result<StimulusSet, FormatError> {
    parse_stimuli(&read_text(path)?, path).map(|(set, _)| set)
}

/// Family of the first record, which every other record must share.
fn file_family<'a>(
    families: impl Iterator<Item = (usize, &'a str)>,
    path: &Path,
) -> Result<Option<Family>, FormatError> {
    let mut family = None;
    for (line, f) in families {
        let f = parse_family(f, path, line)?;
        match family {
            None => family = Some(f),
            Some(g) if g != f => {
                return Err(FormatError::parse(
                    path,
                    line,
                    format!("family {f} in a {g} file; keep one family per file"),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(family)
}

fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
}

pub fn parse_frames(text: &str, path: &Path) -> Result<(Family, Vec<LexicalFrame>), FormatError> {
    let mut records = Vec::new();
    for (line, raw) in numbered_lines(text) {
        let rec: FrameRecord =
            serde_json::from_str(raw).map_err(|e| FormatError::parse(path, line, e.to_string()))?;
        records.push((line, rec));
    }
    let family = file_family(records.iter().map(|(l, r)| (*l, r.family.as_str())), path)?
        .ok_or_else(|| FormatError::Stimulus {
            path: path.to_path_buf(),
            source: StimulusError::NoItems,
        })?;
    let frames = records
        .into_iter()
        .map(|(_, r)| {
            let mut f = LexicalFrame::new(family, r.item_id, r.slots);
            f.source = r.source;
            f
        })
        .collect();
    Ok((family, frames))
}

pub fn parse_items(text: &str, path: &Path) -> Result<(Family, Vec<StimulusItem>), FormatError> {
    let mut records = Vec::new();
    for (line, raw) in numbered_lines(text) {
        let rec: ItemRecord =
            serde_json::from_str(raw).map_err(|e| FormatError::parse(path, line, e.to_string()))?;
        records.push((line, rec));
    }
    let family = file_family(records.iter().map(|(l, r)| (*l, r.family.as_str())), path)?
        .ok_or_else(|| FormatError::Stimulus {
            path: path.to_path_buf(),
            source: StimulusError::NoItems,
        })?;
    let mut items = Vec::with_capacity(records.len());
    for (line, r) in records {
        let condition = Condition::parse(family, &r.condition).ok_or_else(|| {
            FormatError::parse(path, line, format!("unknown {family} condition `{}`", r.condition))
        })?;
        items.push(StimulusItem {
            item_id: r.item_id,
            condition,
            preamble: r.preamble,
        });
    }
    Ok((family, items))
}

pub fn item_records(set: &StimulusSet) -> Vec<ItemRecord> {
    set.items
        .iter()
        .map(|i| ItemRecord {
            item_id: i.item_id.clone(),
            family: set.family.as_str().into(),
            condition: i.condition.label().into(),
            preamble: i.preamble.clone(),
        })
        .collect()
}

/// Lexicon file contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconFile {
    pub family: String,
    pub version: String,
    #[serde(default)]
    pub npi_terms: Vec<String>,
    #[serde(default)]
    pub licensor_terms: Vec<String>,
    #[serde(default)]
    pub dc_negative_terms: Vec<String>,
    /// Free text about how the lists were chosen. Not used for matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl LexiconFile {
    pub fn from_lexicon(lex: &PolarityLexicon) -> Self {
        let owned = |it: &mut dyn Iterator<Item = &str>| it.map(String::from).collect();
        Self {
            family: lex.family().as_str().into(),
            version: lex.version().into(),
            npi_terms: owned(&mut lex.npi_terms()),
            licensor_terms: owned(&mut lex.licensor_terms()),
            dc_negative_terms: owned(&mut lex.dc_negative_terms()),
            notes: None,
        }
    }
}

pub fn parse_lexicon(text: &str, path: &Path) -> Result<PolarityLexicon, FormatError> {
    let file: LexiconFile = serde_json::from_str(text).map_err(|e| FormatError::parse(path, e.line(), e.to_string()))?;
    let family = parse_family(&file.family, path, 1)?;
    PolarityLexicon::new(
        family,
        &file.npi_terms,
        &file.licensor_terms,
        &file.dc_negative_terms,
        &file.version,
    )
    .map_err(|source| FormatError::Lexicon {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_lexicon(path: &Path) -> Result<PolarityLexicon, FormatError> {
    parse_lexicon(&read_text(path)?, path)
}

/// One hand-labeled surface.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldenEntry {
    /// 1-based line in the file.
    pub line: usize,
    pub family: Family,
    pub surface: String,
    pub expected: Polarity,
}

/// Tab-separated `family surface expected_category` with a header row.
/// Surfaces are taken verbatim, leading spaces included.
pub fn parse_golden(text: &str, path: &Path) -> Result<Vec<GoldenEntry>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == "family\tsurface\texpected_category" => {}
        _ => return Err(FormatError::parse(path, 1, "expected header `family\\tsurface\\texpected_category`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(FormatError::parse(path, i + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let expected = Polarity::parse(cols[2].trim())
            .ok_or_else(|| FormatError::parse(path, i + 1, format!("bad category `{}`", cols[2])))?;
        out.push(GoldenEntry {
            line: i + 1,
            family: parse_family(cols[0], path, i + 1)?,
            surface: cols[1].to_string(),
            expected,
        });
    }
    Ok(out)
}

/// A checkpoint written either as a step number or as a name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckpointSpec {
    Step(u64),
    Name(String),
}

impl CheckpointSpec {
    pub fn resolve(&self) -> Option<Checkpoint> {
        match self {
            CheckpointSpec::Step(n) => Some(Checkpoint::Step(*n)),
            CheckpointSpec::Name(s) => Checkpoint::parse(s),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    vocab: Vec<String>,
    #[serde(default)]
    context_limit: Option<usize>,
    #[serde(default)]
    checkpoints: Vec<CheckpointSpec>,
    default: BTreeMap<String, f64>,
    #[serde(default)]
    table: Vec<TableEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    prefix: Vec<u32>,
    probs: BTreeMap<String, f64>,
}

/// A reference model loaded from a table file.
#[derive(Clone, Debug)]
pub struct ReferenceTable {
    pub model: ReferenceLm,
    /// Checkpoints the file serves. Defaults to `final` alone.
    pub checkpoints: Vec<Checkpoint>,
}

fn sparse(probs: &BTreeMap<String, f64>, path: &Path) -> Result<Vec<(TokenId, f64)>, FormatError> {
    probs
        .iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<u32>()
                .map(|id| (TokenId(id), *v))
                .map_err(|_| FormatError::parse(path, 0, format!("token id `{k}` is not a number")))
        })
        .collect()
}

pub fn parse_reference_table(text: &str, path: &Path) -> Result<ReferenceTable, FormatError> {
    let file: TableFile = serde_json::from_str(text).map_err(|e| FormatError::parse(path, e.line(), e.to_string()))?;
    let mut checkpoints = Vec::new();
    for c in &file.checkpoints {
        let cp = c
            .resolve()
            .ok_or_else(|| FormatError::parse(path, 0, format!("bad checkpoint {c:?}")))?;
        if !checkpoints.contains(&cp) {
            checkpoints.push(cp);
        }
    }
    if checkpoints.is_empty() {
        checkpoints.push(Checkpoint::Final);
    }
    let mut b = ReferenceLmBuilder::new(file.vocab).default_probs(sparse(&file.default, path)?);
    if let Some(limit) = file.context_limit {
        b = b.context_limit(limit);
    }
    for e in &file.table {
        let key = e.prefix.iter().map(|&i| TokenId(i)).collect();
        b = b.entry(key, sparse(&e.probs, path)?);
    }
    let model = b.build().map_err(|source| FormatError::Table {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ReferenceTable { model, checkpoints })
}

/// Per-prompt result line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub item_id: String,
    pub family: String,
    pub condition: String,
    pub model: String,
    pub checkpoint: String,
    pub sum_p_neg: f64,
    pub sum_p_pos: f64,
    pub delta_logprob: f64,
    pub lexicon_version: String,
    pub smoothing: f64,
    pub smoothing_mode: String,
}

impl ResultRecord {
    pub fn new(r: &PromptResult, lexicon_version: &str) -> Self {
        Self {
            item_id: r.item_id.clone(),
            family: r.condition.family().as_str().into(),
            condition: r.condition.label().into(),
            model: r.model_name.clone(),
            checkpoint: r.checkpoint.to_string(),
            sum_p_neg: r.sum_prob_negative,
            sum_p_pos: r.sum_prob_positive,
            delta_logprob: r.delta_logprob,
            lexicon_version: lexicon_version.into(),
            smoothing: r.smoothing.value,
            smoothing_mode: r.smoothing.mode.as_str().into(),
        }
    }

    pub fn to_prompt_result(&self) -> Result<PromptResult, String> {
        let family = Family::parse(&self.family).ok_or_else(|| format!("unknown family `{}`", self.family))?;
        let condition = Condition::parse(family, &self.condition)
            .ok_or_else(|| format!("unknown condition `{}`", self.condition))?;
        let checkpoint =
            Checkpoint::parse(&self.checkpoint).ok_or_else(|| format!("bad checkpoint `{}`", self.checkpoint))?;
        let mode = SmoothingMode::parse(&self.smoothing_mode)
            .ok_or_else(|| format!("unknown smoothing mode `{}`", self.smoothing_mode))?;
        Ok(PromptResult {
            item_id: self.item_id.clone(),
            condition,
            model_name: self.model.clone(),
            checkpoint,
            sum_prob_negative: self.sum_p_neg,
            sum_prob_positive: self.sum_p_pos,
            delta_logprob: self.delta_logprob,
            smoothing: Smoothing {
                value: self.smoothing,
                mode,
            },
        })
    }
}

/// One ranked continuation of one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamRecord {
    pub item_id: String,
    pub condition: String,
    pub rank: usize,
    pub token_ids: Vec<u32>,
    pub surface_text: String,
    pub step_logprobs: Vec<f64>,
    pub cum_logprob: f64,
    pub category: String,
    pub fired_rule: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.jsonl")
    }

    #[test]
    fn frames_and_items_round_trip() {
        let text = r#"{"item_id":"a","family":"dc","slots":{"subject":"detail","adjective":"small"}}"#;
        let (set, layout) = parse_stimuli(text, p()).unwrap();
        assert_eq!(layout, StimulusLayout::Frames);
        assert_eq!(set.items.len(), 8);
        let items = to_jsonl(&item_records(&set));
        let (again, layout) = parse_stimuli(&items, p()).unwrap();
        assert_eq!(layout, StimulusLayout::Items);
        assert_eq!(again, set);
    }

    #[test]
    fn mixed_families_rejected_with_line() {
        let text = "{\"item_id\":\"a\",\"family\":\"dc\",\"slots\":{\"subject\":\"x\",\"adjective\":\"y\"}}\n\n\
                    {\"item_id\":\"b\",\"family\":\"npi\",\"slots\":{}}\n";
        let err = parse_stimuli(text, p()).unwrap_err();
        assert!(matches!(err, FormatError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_json_reports_line() {
        let err = parse_jsonl::<ItemRecord>("\n{oops", p()).unwrap_err();
        assert!(matches!(err, FormatError::Parse { line: 2, .. }));
    }

    #[test]
    fn golden_requires_header_and_three_columns() {
        assert!(parse_golden("npi\tx\tNEGATIVE\n", p()).is_err());
        let g = parse_golden("family\tsurface\texpected_category\nnpi\t ever\tNEGATIVE\n", p()).unwrap();
        assert_eq!(g[0].surface, " ever");
        assert_eq!(g[0].line, 2);
        assert!(parse_golden("family\tsurface\texpected_category\nnpi\tx\n", p()).is_err());
    }

    #[test]
    fn reference_table_defaults_to_final() {
        let text = r#"{"vocab":["a","b"],"default":{"0":0.5,"1":0.5},"table":[{"prefix":[0],"probs":{"1":1.0}}]}"#;
        let t = parse_reference_table(text, p()).unwrap();
        assert_eq!(t.checkpoints, vec![Checkpoint::Final]);
        assert_eq!(t.model.full_logprobs(&[TokenId(0)])[1], 0.0);
        let bad = r#"{"vocab":["a"],"default":{"0":0.5}}"#;
        assert!(matches!(parse_reference_table(bad, p()), Err(FormatError::Table { .. })));
    }

    #[test]
    fn checkpoint_specs() {
        let cps: Vec<CheckpointSpec> = serde_json::from_str(r#"["final", 1000, "step512"]"#).unwrap();
        let got: Vec<_> = cps.iter().map(|c| c.resolve().unwrap()).collect();
        assert_eq!(got, vec![Checkpoint::Final, Checkpoint::Step(1000), Checkpoint::Step(512)]);
    }
}
