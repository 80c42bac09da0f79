//! Experiment grid over models and checkpoints, with a resumable run store.
//!
//! A run lives in `<store>/<run-id>/`:
//!
//! ```text
//! manifest.json            what to compute; written once at planning
//! ledger.jsonl             append-only cell status transitions
//! inputs/                  snapshots of stimuli, lexicons and reference tables
//! cells/<cell>.results.jsonl
//! cells/<cell>.beams.jsonl
//! cells/<cell>.partial.jsonl   per-item progress of an unfinished cell
//! ```
//!
//! A cell is one (model, checkpoint) pair. Its outputs are written to a
//! temporary name, synced and renamed before the DONE record carrying their
//! SHA-256 is appended, so a DONE record always points at a complete file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use polarity_core::{
    BeamParams, Checkpoint, CiMethod, Family, PolarityLexicon, Smoothing, SmoothingMode, StimulusSet,
};
use serde::{Deserialize, Serialize};

use crate::backend::{self, BackendConfig, BackendError};
use crate::evaluate::{evaluate_item, EvalSettings};
use crate::formats::{self, BeamRecord, CheckpointSpec, FormatError, LexiconFile, ResultRecord};
use crate::shipped;

/// Models used when a config does not list any.
pub const DEFAULT_MODELS: [&str; 7] = [
    "pythia-160m-deduped",
    "pythia-410m-deduped",
    "pythia-1b-deduped",
    "pythia-1.4b-deduped",
    "pythia-2.8b-deduped",
    "pythia-6.9b-deduped",
    "pythia-12b-deduped",
];

/// Checkpoints of a training-trajectory sweep.
pub const DEFAULT_TRAINING_STEPS: [u64; 8] = [256, 512, 1000, 2000, 10_000, 50_000, 100_000, 143_000];

/// Abort the process after this many items have been appended to partial
/// files. Used to test crash recovery.
pub const ABORT_ENV: &str = "POLARITY_ABORT_AFTER_ITEMS";

const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("config {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("planning: {0}")]
    Planning(#[from] BackendError),
    #[error(transparent)]
    Input(#[from] FormatError),
    #[error("no run `{run_id}` in {}", store.display())]
    UnknownRun { run_id: String, store: PathBuf },
    #[error("run `{0}` already exists with a different manifest")]
    ManifestConflict(String),
    #[error("run {run_id}: {msg}")]
    Corrupt { run_id: String, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cell {0} is not part of the manifest")]
    UnknownCell(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    pub width: usize,
    pub depth: usize,
    pub per_level_k: usize,
}

impl Default for BeamSection {
    fn default() -> Self {
        let p = BeamParams::default();
        Self {
            width: p.width,
            depth: p.depth,
            per_level_k: p.per_level_k,
        }
    }
}

impl BeamSection {
    pub fn params(&self) -> BeamParams {
        BeamParams {
            width: self.width,
            depth: self.depth,
            per_level_k: self.per_level_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingSection {
    pub value: f64,
    pub mode: String,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        Self {
            value: 0.001,
            mode: SmoothingMode::Additive.as_str().into(),
        }
    }
}

impl SmoothingSection {
    pub fn smoothing(&self) -> Option<Smoothing> {
        let mode = SmoothingMode::parse(&self.mode)?;
        (self.value.is_finite() && self.value > 0.0).then_some(Smoothing {
            value: self.value,
            mode,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CiSection {
    /// `normal` or `bootstrap`.
    pub method: String,
    pub resamples: usize,
    pub seed: u64,
}

fn default_resamples() -> usize {
    10_000
}

impl Default for CiSection {
    fn default() -> Self {
        Self {
            method: "normal".into(),
            resamples: default_resamples(),
            seed: 0,
        }
    }
}

impl CiSection {
    pub fn method(&self) -> Option<CiMethod> {
        match self.method.as_str() {
            "normal" => Some(CiMethod::Normal),
            "bootstrap" if self.resamples > 0 => Some(CiMethod::Bootstrap {
                resamples: self.resamples,
                seed: self.seed,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub trailing_space: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconPaths {
    npi: Option<PathBuf>,
    dc: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    run_id: Option<String>,
    store_dir: Option<PathBuf>,
    models: Option<Vec<String>>,
    checkpoints: Option<Vec<CheckpointSpec>>,
    #[serde(default)]
    stimuli: Vec<PathBuf>,
    #[serde(default)]
    lexicons: LexiconPaths,
    #[serde(default)]
    beam: BeamSection,
    #[serde(default)]
    smoothing: SmoothingSection,
    #[serde(default)]
    ci: CiSection,
    #[serde(default)]
    tokenizer: TokenizerSection,
    parallelism: Option<usize>,
    cache_dir: Option<PathBuf>,
    #[serde(default)]
    download: bool,
    #[serde(default)]
    reference_models: BTreeMap<String, PathBuf>,
}

/// A parsed config with paths made absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub path: PathBuf,
    pub run_id: Option<String>,
    pub store_dir: Option<PathBuf>,
    pub models: Vec<String>,
    pub checkpoints: Vec<Checkpoint>,
    /// Empty means the shipped NPI and DC sets.
    pub stimuli: Vec<PathBuf>,
    pub lexicons: BTreeMap<Family, PathBuf>,
    pub beam: BeamSection,
    pub smoothing: SmoothingSection,
    pub ci: CiSection,
    pub tokenizer: TokenizerSection,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub download: bool,
    pub reference_models: BTreeMap<String, PathBuf>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let text = fs::read_to_string(path).map_err(|e| SweepError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Self, SweepError> {
        let err = |msg: String| SweepError::Config {
            path: path.to_path_buf(),
            msg,
        };
        let file: ConfigFile = toml::from_str(text).map_err(|e| err(e.to_string()))?;
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let models = file.models.unwrap_or_else(|| DEFAULT_MODELS.iter().map(|s| s.to_string()).collect());
        if models.is_empty() {
            return Err(err("the model list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = models.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(err(format!("model `{dup}` listed twice")));
        }
        let checkpoints = match file.checkpoints {
            None => vec![Checkpoint::Final],
            Some(list) => list
                .iter()
                .map(|c| c.resolve().ok_or_else(|| err(format!("bad checkpoint {c:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if checkpoints.is_empty() {
            return Err(err("the checkpoint list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = checkpoints.iter().find(|c| !seen.insert(**c)) {
            return Err(err(format!("checkpoint {dup} listed twice")));
        }
        if file.beam.params().validate().is_err() {
            return Err(err(format!("beam parameters must be at least 1: {:?}", file.beam)));
        }
        if file.smoothing.smoothing().is_none() {
            return Err(err(format!(
                "smoothing needs a positive value and mode `additive` or `zero-only`, got {:?}",
                file.smoothing
            )));
        }
        if file.ci.method().is_none() {
            return Err(err(format!("unknown CI method {:?}", file.ci)));
        }
        let parallelism = file.parallelism.unwrap_or(1);
        if parallelism == 0 {
            return Err(err("parallelism must be at least 1".into()));
        }
        if let Some(id) = &file.run_id {
            validate_run_id(id).map_err(err)?;
        }
        let mut lexicons = BTreeMap::new();
        if let Some(p) = &file.lexicons.npi {
            lexicons.insert(Family::Npi, abs(p));
        }
        if let Some(p) = &file.lexicons.dc {
            lexicons.insert(Family::Dc, abs(p));
        }
        Ok(Self {
            path: path.to_path_buf(),
            run_id: file.run_id,
            store_dir: file.store_dir.as_ref().map(abs),
            models,
            checkpoints,
            stimuli: file.stimuli.iter().map(abs).collect(),
            lexicons,
            beam: file.beam,
            smoothing: file.smoothing,
            ci: file.ci,
            tokenizer: file.tokenizer,
            parallelism,
            cache_dir: file.cache_dir.as_ref().map(abs),
            download: file.download,
            reference_models: file.reference_models.iter().map(|(k, v)| (k.clone(), abs(v))).collect(),
        })
    }
}

fn validate_run_id(id: &str) -> Result<(), String> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(format!("run id `{id}` may only use letters, digits, `-`, `_` and `.`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub model: String,
    pub checkpoint: String,
    pub backend: String,
}

impl CellSpec {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::parse(&self.checkpoint).expect("manifest checkpoints are valid")
    }

    /// File-name-safe identifier.
    pub fn slug(&self) -> String {
        let model: String = self
            .model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' })
            .collect();
        format!("{model}@{}", self.checkpoint)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusEntry {
    pub family: String,
    pub source: String,
    pub source_sha256: String,
    /// Snapshot of the expanded items, relative to the run directory.
    pub items_file: String,
    pub items_sha256: String,
    pub frames: usize,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub family: String,
    pub version: String,
    pub source: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub source: String,
    pub file: String,
    pub sha256: String,
}

/// Everything a run computes, fixed at planning time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub run_id: String,
    pub models: Vec<String>,
    pub checkpoints: Vec<String>,
    pub cells: Vec<CellSpec>,
    pub stimuli: Vec<StimulusEntry>,
    pub lexicons: Vec<LexiconEntry>,
    pub reference_models: BTreeMap<String, ReferenceEntry>,
    pub beam: BeamSection,
    pub smoothing: SmoothingSection,
    pub ci: CiSection,
    pub tokenizer: TokenizerSection,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub download: bool,
}

impl Manifest {
    /// Hash of the fields that determine the results. Scheduling and
    /// cache location are left out.
    pub fn content_hash(&self) -> String {
        let mut m = self.clone();
        m.run_id.clear();
        m.parallelism = 0;
        m.cache_dir = None;
        m.download = false;
        for s in &mut m.stimuli {
            s.source.clear();
        }
        for l in &mut m.lexicons {
            l.source.clear();
        }
        for r in m.reference_models.values_mut() {
            r.source.clear();
        }
        formats::sha256_hex(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            beam: self.beam.params(),
            smoothing: self.smoothing.smoothing().expect("validated at planning"),
            trailing_space: self.tokenizer.trailing_space,
        }
    }

    pub fn ci_method(&self) -> CiMethod {
        self.ci.method().expect("validated at planning")
    }

    pub fn families(&self) -> Vec<Family> {
        self.stimuli.iter().filter_map(|s| Family::parse(&s.family)).collect()
    }

    pub fn cell(&self, model: &str, checkpoint: Checkpoint) -> Option<&CellSpec> {
        self.cells.iter().find(|c| c.model == model && c.checkpoint() == checkpoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CellStatus {
    Pending,
    Done,
    Failed,
}

/// One ledger line: the state a cell entered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub run_id: String,
    pub cell: String,
    pub model: String,
    pub checkpoint: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beams_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    fn new(run_id: &str, cell: &CellSpec, status: CellStatus) -> Self {
        Self {
            run_id: run_id.into(),
            cell: cell.slug(),
            model: cell.model.clone(),
            checkpoint: cell.checkpoint.clone(),
            status,
            results_file: None,
            results_sha256: None,
            beams_file: None,
            beams_sha256: None,
            rows: None,
            error: None,
        }
    }

    fn failed(run_id: &str, cell: &CellSpec, error: impl Into<String>) -> Self {
        Self {
            error: Some(error.into()),
            ..Self::new(run_id, cell, CellStatus::Failed)
        }
    }
}

/// A directory of runs.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn open(&self, run_id: &str) -> Result<Run, SweepError> {
        let unknown = || SweepError::UnknownRun {
            run_id: run_id.into(),
            store: self.root.clone(),
        };
        if validate_run_id(run_id).is_err() {
            return Err(unknown());
        }
        let dir = self.run_dir(run_id);
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(unknown());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SweepError::Corrupt {
            run_id: run_id.into(),
            msg: format!("manifest.json: {e}"),
        })?;
        Run::open(dir, manifest)
    }
}

struct LoadedInput {
    set: StimulusSet,
    lexicon: PolarityLexicon,
}

/// An opened run.
pub struct Run {
    dir: PathBuf,
    manifest: Manifest,
    inputs: Vec<LoadedInput>,
    backend: BackendConfig,
    ledger_lock: Mutex<()>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SweepError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    sync_dir(path.parent().unwrap_or(Path::new(".")));
    Ok(())
}

fn sync_dir(dir: &Path) {
    // Directory fsync is best effort; not every platform allows it.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn source_label(p: &Path) -> String {
    p.display().to_string()
}

/// Validates a config, snapshots its inputs and writes the manifest.
/// Nothing is computed. An existing run with the same id is returned
/// as-is if its manifest matches.
pub fn plan_sweep(config: &SweepConfig, store: &Store) -> Result<Run, SweepError> {
    let backend_cfg = BackendConfig {
        cache_dir: config.cache_dir.clone(),
        reference_models: config.reference_models.clone(),
        allow_download: config.download,
    };
    let mut cells = Vec::new();
    for model in &config.models {
        for &cp in &config.checkpoints {
            let resolved = backend::resolve(model, cp, &backend_cfg)?;
            cells.push(CellSpec {
                model: model.clone(),
                checkpoint: cp.to_string(),
                backend: resolved.handle.backend.as_str().into(),
            });
        }
    }
    // (family, source label, source bytes, set)
    let mut sets: Vec<(Family, String, Vec<u8>, StimulusSet)> = Vec::new();
    if config.stimuli.is_empty() {
        for family in [Family::Npi, Family::Dc] {
            let text = shipped::stimuli_text(family);
            sets.push((family, shipped::label(family, "stimuli"), text.as_bytes().to_vec(), shipped::stimuli(family)));
        }
    } else {
        for p in &config.stimuli {
            let text = formats::read_text(p)?;
            let (set, _) = formats::parse_stimuli(&text, p)?;
            if sets.iter().any(|s| s.0 == set.family) {
                return Err(SweepError::Config {
                    path: config.path.clone(),
                    msg: format!("more than one {} stimulus file", set.family),
                });
            }
            sets.push((set.family, source_label(p), text.into_bytes(), set));
        }
    }
    let mut lexicons = Vec::new();
    for (family, ..) in &sets {
        let (lex, source) = match config.lexicons.get(family) {
            Some(p) => (formats::load_lexicon(p)?, source_label(p)),
            None => (shipped::lexicon(*family), shipped::label(*family, "lexicon")),
        };
        if lex.family() != *family {
            return Err(SweepError::Config {
                path: config.path.clone(),
                msg: format!("the {family} lexicon entry points at a {} lexicon", lex.family()),
            });
        }
        lexicons.push((lex, source));
    }
    let mut refs = Vec::new();
    for (name, path) in &config.reference_models {
        if !config.models.iter().any(|m| m.strip_prefix("ref:") == Some(name.as_str())) {
            continue;
        }
        refs.push((name.clone(), source_label(path), fs::read(path).map_err(io_err(path))?));
    }

    let mut snapshots: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stimuli = Vec::new();
    for (family, source, bytes, set) in &sets {
        let items = formats::to_jsonl(&formats::item_records(set)).into_bytes();
        let file = format!("inputs/{family}.items.jsonl");
        stimuli.push(StimulusEntry {
            family: family.as_str().into(),
            source: source.clone(),
            source_sha256: formats::sha256_hex(bytes),
            items_file: file.clone(),
            items_sha256: formats::sha256_hex(&items),
            frames: set.frame_count,
            items: set.items.len(),
        });
        snapshots.push((file, items));
    }
    let mut lexicon_entries = Vec::new();
    for (lex, source) in &lexicons {
        let mut bytes = serde_json::to_vec_pretty(&LexiconFile::from_lexicon(lex)).expect("lexicon serializes");
        bytes.push(b'\n');
        let file = format!("inputs/{}.lexicon.json", lex.family());
        lexicon_entries.push(LexiconEntry {
            family: lex.family().as_str().into(),
            version: lex.version().into(),
            source: source.clone(),
            file: file.clone(),
            sha256: formats::sha256_hex(&bytes),
        });
        snapshots.push((file, bytes));
    }
    let mut reference_models = BTreeMap::new();
    for (name, source, bytes) in refs {
        let file = format!("inputs/ref-{name}.json");
        reference_models.insert(
            name,
            ReferenceEntry {
                source,
                file: file.clone(),
                sha256: formats::sha256_hex(&bytes),
            },
        );
        snapshots.push((file, bytes));
    }

    let mut manifest = Manifest {
        format: MANIFEST_FORMAT,
        run_id: String::new(),
        models: config.models.clone(),
        checkpoints: config.checkpoints.iter().map(|c| c.to_string()).collect(),
        cells,
        stimuli,
        lexicons: lexicon_entries,
        reference_models,
        beam: config.beam,
        smoothing: config.smoothing.clone(),
        ci: config.ci.clone(),
        tokenizer: config.tokenizer,
        parallelism: config.parallelism,
        cache_dir: config.cache_dir.clone(),
        download: config.download,
    };
    manifest.run_id = match &config.run_id {
        Some(id) => id.clone(),
        None => format!("run-{}", &manifest.content_hash()[..12]),
    };

    let dir = store.run_dir(&manifest.run_id);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() {
        let existing = store.open(&manifest.run_id)?;
        if existing.manifest.content_hash() != manifest.content_hash() {
            return Err(SweepError::ManifestConflict(manifest.run_id));
        }
        return Ok(existing);
    }
    fs::create_dir_all(dir.join("inputs")).map_err(io_err(&dir))?;
    fs::create_dir_all(dir.join("cells")).map_err(io_err(&dir))?;
    for (file, bytes) in &snapshots {
        write_atomic(&dir.join(file), bytes)?;
    }
    let ledger_path = dir.join("ledger.jsonl");
    let pending: Vec<RunRecord> = manifest
        .cells
        .iter()
        .map(|c| RunRecord::new(&manifest.run_id, c, CellStatus::Pending))
        .collect();
    write_atomic(&ledger_path, formats::to_jsonl(&pending).as_bytes())?;
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    // The manifest goes last: its presence marks a fully planned run.
    write_atomic(&manifest_path, &bytes)?;
    Run::open(dir, manifest)
}

static ITEMS_APPENDED: AtomicUsize = AtomicUsize::new(0);

fn abort_threshold() -> Option<usize> {
    std::env::var(ABORT_ENV).ok()?.trim().parse().ok()
}

/// A partial-file line: one finished prompt.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialLine {
    result: ResultRecord,
    beams: Vec<BeamRecord>,
}

impl Run {
    fn open(dir: PathBuf, manifest: Manifest) -> Result<Self, SweepError> {
        let corrupt = |msg: String| SweepError::Corrupt {
            run_id: manifest.run_id.clone(),
            msg,
        };
        let read_checked = |file: &str, sha: &str| -> Result<(PathBuf, String), SweepError> {
            let path = dir.join(file);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            if formats::sha256_hex(text.as_bytes()) != sha {
                return Err(corrupt(format!("{file} does not match its manifest hash")));
            }
            Ok((path, text))
        };
        let mut inputs = Vec::new();
        for s in &manifest.stimuli {
            let (path, text) = read_checked(&s.items_file, &s.items_sha256)?;
            let (set, _) = formats::parse_stimuli(&text, &path)?;
            let lex_entry = manifest
                .lexicons
                .iter()
                .find(|l| l.family == s.family)
                .ok_or_else(|| corrupt(format!("no lexicon for {}", s.family)))?;
            let (path, text) = read_checked(&lex_entry.file, &lex_entry.sha256)?;
            let lexicon = formats::parse_lexicon(&text, &path)?;
            inputs.push(LoadedInput { set, lexicon });
        }
        let mut reference_models = BTreeMap::new();
        for (name, r) in &manifest.reference_models {
            let (path, _) = read_checked(&r.file, &r.sha256)?;
            reference_models.insert(name.clone(), path);
        }
        let backend = BackendConfig {
            cache_dir: manifest.cache_dir.clone(),
            reference_models,
            allow_download: manifest.download,
        };
        Ok(Self {
            dir,
            manifest,
            inputs,
            backend,
            ledger_lock: Mutex::new(()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stimulus sets in manifest order.
    pub fn stimulus_sets(&self) -> impl Iterator<Item = &StimulusSet> {
        self.inputs.iter().map(|i| &i.set)
    }

    pub fn total_items(&self) -> usize {
        self.inputs.iter().map(|i| i.set.items.len()).sum()
    }

    fn ledger_path(&self) -> PathBuf {
        self.dir.join("ledger.jsonl")
    }

    fn append(&self, record: &RunRecord) -> Result<(), SweepError> {
        let _guard = self.ledger_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.ledger_path();
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_all().map_err(io_err(&path))
    }

    /// Every ledger line, in order. A torn final line (from a crash while
    /// appending) is ignored; damage elsewhere is an error.
    pub fn ledger(&self) -> Result<Vec<RunRecord>, SweepError> {
        let _guard = self.ledger_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.ledger_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let lines: Vec<&str> = text.lines().collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(r) => out.push(r),
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {}
                Err(e) => {
                    return Err(SweepError::Corrupt {
                        run_id: self.run_id().into(),
                        msg: format!("ledger line {}: {e}", i + 1),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Latest record of every cell, in manifest order. Cells without a
    /// record are PENDING.
    pub fn statuses(&self) -> Result<Vec<RunRecord>, SweepError> {
        let mut latest: HashMap<String, RunRecord> = HashMap::new();
        for r in self.ledger()? {
            latest.insert(r.cell.clone(), r);
        }
        Ok(self
            .manifest
            .cells
            .iter()
            .map(|c| {
                latest
                    .remove(&c.slug())
                    .unwrap_or_else(|| RunRecord::new(self.run_id(), c, CellStatus::Pending))
            })
            .collect())
    }

    fn cell_path(&self, cell: &CellSpec, kind: &str) -> (String, PathBuf) {
        let rel = format!("cells/{}.{kind}.jsonl", cell.slug());
        let abs = self.dir.join(&rel);
        (rel, abs)
    }

    /// Whether a DONE record's files exist and match their hashes.
    fn intact(&self, record: &RunRecord) -> bool {
        let check = |file: &Option<String>, sha: &Option<String>| match (file, sha) {
            (Some(f), Some(s)) => fs::read(self.dir.join(f)).is_ok_and(|b| formats::sha256_hex(&b) == *s),
            _ => false,
        };
        check(&record.results_file, &record.results_sha256) && check(&record.beams_file, &record.beams_sha256)
    }

    /// Current statuses with damaged DONE cells demoted to FAILED (and the
    /// demotion recorded in the ledger).
    pub fn verify(&self) -> Result<Vec<RunRecord>, SweepError> {
        let mut out = Vec::new();
        for (cell, record) in self.manifest.cells.iter().zip(self.statuses()?) {
            if record.status == CellStatus::Done && !self.intact(&record) {
                let failed = RunRecord::failed(self.run_id(), cell, "results file missing or content hash mismatch");
                self.append(&failed)?;
                out.push(failed);
            } else {
                out.push(record);
            }
        }
        Ok(out)
    }

    /// Computes one cell. A DONE cell with intact files is left alone and
    /// its record returned.
    pub fn run_cell(&self, cell: &CellSpec) -> Result<RunRecord, SweepError> {
        let index = self
            .manifest
            .cells
            .iter()
            .position(|c| c == cell)
            .ok_or_else(|| SweepError::UnknownCell(cell.slug()))?;
        let current = self.statuses()?.swap_remove(index);
        if current.status == CellStatus::Done {
            if self.intact(&current) {
                return Ok(current);
            }
            self.append(&RunRecord::failed(
                self.run_id(),
                cell,
                "results file missing or content hash mismatch",
            ))?;
        }
        let (_, partial) = self.cell_path(cell, "partial");
        let record = match self.compute(cell, &partial) {
            Ok(record) => record,
            Err(msg) => {
                let _ = fs::remove_file(&partial);
                RunRecord::failed(self.run_id(), cell, msg)
            }
        };
        self.append(&record)?;
        Ok(record)
    }

    fn compute(&self, cell: &CellSpec, partial: &Path) -> Result<RunRecord, String> {
        let checkpoint = cell.checkpoint();
        let model = backend::open_model(&cell.model, checkpoint, &self.backend).map_err(|e| e.to_string())?;
        let settings = self.manifest.settings();
        let mut done = read_partial(partial, self.total_items())?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(partial)
            .map_err(|e| format!("{}: {e}", partial.display()))?;
        let abort_after = abort_threshold();
        for input in &self.inputs {
            for item in &input.set.items {
                let key = (item.item_id.clone(), item.condition.label().to_string());
                if done.contains_key(&key) {
                    continue;
                }
                let outcome = evaluate_item(&*model.lm, &cell.model, checkpoint, item, &input.lexicon, &settings)
                    .map_err(|e| e.to_string())?;
                let line = PartialLine {
                    result: outcome.record(input.lexicon.version()),
                    beams: outcome.beams,
                };
                let mut text = serde_json::to_string(&line).expect("partial line serializes");
                text.push('\n');
                file.write_all(text.as_bytes())
                    .and_then(|_| file.sync_data())
                    .map_err(|e| format!("{}: {e}", partial.display()))?;
                done.insert(key, line);
                let n = ITEMS_APPENDED.fetch_add(1, Ordering::SeqCst) + 1;
                if abort_after.is_some_and(|limit| n >= limit) {
                    std::process::abort();
                }
            }
        }
        drop(file);

        let mut results = Vec::with_capacity(done.len());
        let mut beams = Vec::new();
        for input in &self.inputs {
            for item in &input.set.items {
                let key = (item.item_id.clone(), item.condition.label().to_string());
                let line = done.remove(&key).expect("every item computed");
                results.push(line.result);
                beams.extend(line.beams);
            }
        }
        let results_text = formats::to_jsonl(&results);
        let beams_text = formats::to_jsonl(&beams);
        let (results_rel, results_abs) = self.cell_path(cell, "results");
        let (beams_rel, beams_abs) = self.cell_path(cell, "beams");
        write_atomic(&beams_abs, beams_text.as_bytes()).map_err(|e| e.to_string())?;
        write_atomic(&results_abs, results_text.as_bytes()).map_err(|e| e.to_string())?;
        let _ = fs::remove_file(partial);
        Ok(RunRecord {
            results_file: Some(results_rel),
            results_sha256: Some(formats::sha256_hex(results_text.as_bytes())),
            beams_file: Some(beams_rel),
            beams_sha256: Some(formats::sha256_hex(beams_text.as_bytes())),
            rows: Some(results.len()),
            ..RunRecord::new(self.run_id(), cell, CellStatus::Done)
        })
    }

    /// Runs every PENDING or FAILED cell (after demoting damaged DONE
    /// cells), at most `parallelism` at a time. Returns the records of
    /// the cells processed, in manifest order.
    pub fn resume(&self) -> Result<Vec<RunRecord>, SweepError> {
        let work: Vec<&CellSpec> = self
            .manifest
            .cells
            .iter()
            .zip(self.verify()?)
            .filter(|(_, r)| r.status != CellStatus::Done)
            .map(|(c, _)| c)
            .collect();
        let workers = self.manifest.parallelism.max(1).min(work.len());
        let queue = Mutex::new(work.iter().enumerate().rev().collect::<Vec<_>>());
        let results: Mutex<Vec<(usize, Result<RunRecord, SweepError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let next = queue.lock().unwrap_or_else(|p| p.into_inner()).pop();
                    let Some((i, cell)) = next else { break };
                    let r = self.run_cell(cell);
                    results.lock().unwrap_or_else(|p| p.into_inner()).push((i, r));
                });
            }
        });
        let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
        results.sort_by_key(|(i, _)| *i);
        results.into_iter().map(|(_, r)| r).collect()
    }

    /// Result rows of a DONE cell.
    pub fn load_results(&self, record: &RunRecord) -> Result<Vec<ResultRecord>, SweepError> {
        let file = record.results_file.as_ref().ok_or_else(|| SweepError::Corrupt {
            run_id: self.run_id().into(),
            msg: format!("cell {} has no results file", record.cell),
        })?;
        let path = self.dir.join(file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        if record.results_sha256.as_deref() != Some(formats::sha256_hex(text.as_bytes()).as_str()) {
            return Err(SweepError::Corrupt {
                run_id: self.run_id().into(),
                msg: format!("{file} does not match its recorded hash"),
            });
        }
        Ok(formats::parse_jsonl(&text, &path)?)
    }
}

type PartialKey = (String, String);

/// Completed items of an interrupted cell. A torn last line is dropped and
/// the file truncated to its last complete line.
fn read_partial(path: &Path, capacity: usize) -> Result<HashMap<PartialKey, PartialLine>, String> {
    let mut done = HashMap::with_capacity(capacity);
    let Ok(f) = File::open(path) else {
        return Ok(done);
    };
    let mut good_len = 0u64;
    for line in BufReader::new(f).split(b'\n') {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        match serde_json::from_slice::<PartialLine>(&line) {
            Ok(p) => {
                good_len += line.len() as u64 + 1;
                done.insert((p.result.item_id.clone(), p.result.condition.clone()), p);
            }
            Err(_) => break,
        }
    }
    let f = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    f.set_len(good_len).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(done)
}
