//! Model name resolution and loading.
//!
//! Names understood:
//!
//! * `ref:uniformN`, `ref:pointN`: built-in reference models over `N`
//!   single-character tokens (`ref:pointN` puts all mass on the first).
//! * `ref:NAME`: a reference table file registered under `NAME`.
//! * `pythia-SIZE` and `pythia-SIZE-deduped`, optionally prefixed with
//!   `EleutherAI/`: GPT-NeoX checkpoints read from the local model cache.
//!
//! The cache is searched in two layouts: `<cache>/<name>/<revision>/` and
//! the Hugging Face hub layout (`models--EleutherAI--<name>/snapshots/`).
//! The final checkpoint is revision `main`, step `N` is revision `stepN`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use polarity_core::{BackendKind, Checkpoint, LanguageModel, ModelHandle, ReferenceLm, TokenId};

use crate::formats::{self, FormatError};
use crate::neox::{NeoxError, NeoxLm};

/// Environment variable naming the model cache directory.
pub const CACHE_ENV: &str = "POLARITY_MODEL_CACHE";

pub const PYTHIA_FINAL_STEP: u64 = 143_000;

/// Sizes of the suite with their nominal parameter counts.
pub const PYTHIA_SIZES: [(&str, f64); 8] = [
    ("70m", 70e6),
    ("160m", 160e6),
    ("410m", 410e6),
    ("1b", 1.0e9),
    ("1.4b", 1.4e9),
    ("2.8b", 2.8e9),
    ("6.9b", 6.9e9),
    ("12b", 12e9),
];

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("unresolvable model `{0}`")]
    UnknownModel(String),
    #[error("checkpoint {checkpoint} is not available for {model}; available: {available}")]
    UnknownCheckpoint {
        model: String,
        checkpoint: Checkpoint,
        available: String,
    },
    #[error(transparent)]
    Table(#[from] FormatError),
    #[error("{model} at revision {revision} is not in the model cache (searched {})", display_paths(.searched))]
    NotCached {
        model: String,
        revision: String,
        searched: Vec<PathBuf>,
    },
    #[error("loading {model}: {source}")]
    Load {
        model: String,
        #[source]
        source: NeoxError,
    },
    #[error("download of {model} failed: {msg}")]
    Download { model: String, msg: String },
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

/// Where models come from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackendConfig {
    /// Model cache; falls back to `$POLARITY_MODEL_CACHE`, then
    /// `~/.cache/polarity/models`.
    pub cache_dir: Option<PathBuf>,
    /// `ref:NAME` to table file.
    pub reference_models: BTreeMap<String, PathBuf>,
    /// Fetch missing checkpoints from the hub (needs the `hub` feature).
    pub allow_download: bool,
}

impl BackendConfig {
    pub fn cache_root(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            return PathBuf::from(dir);
        }
        home().join(".cache").join("polarity").join("models")
    }
}

fn home() -> PathBuf {
    std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// A named member of the Pythia suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PythiaModel {
    pub size: &'static str,
    pub deduped: bool,
    pub parameters: f64,
}

impl PythiaModel {
    pub fn parse(name: &str) -> Option<Self> {
        let name = name.strip_prefix("EleutherAI/").unwrap_or(name);
        let rest = name.strip_prefix("pythia-")?;
        let (size, deduped) = match rest.strip_suffix("-deduped") {
            Some(s) => (s, true),
            None => (rest, false),
        };
        PYTHIA_SIZES
            .iter()
            .find(|(s, _)| *s == size)
            .map(|&(size, parameters)| Self {
                size,
                deduped,
                parameters,
            })
    }

    pub fn name(&self) -> String {
        if self.deduped {
            format!("pythia-{}-deduped", self.size)
        } else {
            format!("pythia-{}", self.size)
        }
    }

    pub fn repo_id(&self) -> String {
        format!("EleutherAI/{}", self.name())
    }
}

/// Saved training steps of every Pythia model: 0, powers of two up to
/// 512, then every 1000 steps up to 143000.
pub fn pythia_steps() -> Vec<u64> {
    let mut steps = vec![0];
    steps.extend((0..10).map(|i| 1u64 << i));
    steps.extend((1..=143).map(|k| k * 1000));
    steps
}

pub fn pythia_has_checkpoint(c: Checkpoint) -> bool {
    match c {
        Checkpoint::Final => true,
        Checkpoint::Step(n) => n == 0 || (n <= 512 && n.is_power_of_two()) || (n % 1000 == 0 && n <= PYTHIA_FINAL_STEP),
    }
}

const PYTHIA_STEPS_TEXT: &str = "final, 0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, and 1000 to 143000 every 1000";

/// Hub revision holding a checkpoint.
pub fn revision(c: Checkpoint) -> String {
    match c {
        Checkpoint::Final => "main".into(),
        Checkpoint::Step(n) => format!("step{n}"),
    }
}

/// What a name resolved to.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Uniform(usize),
    Point(usize),
    Table { path: PathBuf },
    Pythia(PythiaModel),
}

/// A validated (model, checkpoint) pair, not yet loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub handle: ModelHandle,
    pub source: ModelSource,
}

impl Resolved {
    /// Nominal parameter count, when known.
    pub fn parameters(&self) -> Option<f64> {
        match &self.source {
            ModelSource::Pythia(p) => Some(p.parameters),
            _ => None,
        }
    }
}

fn builtin(rest: &str) -> Option<ModelSource> {
    let parse = |s: &str| s.parse::<usize>().ok().filter(|&n| n > 0);
    if let Some(n) = rest.strip_prefix("uniform") {
        return parse(n).map(ModelSource::Uniform);
    }
    rest.strip_prefix("point").and_then(parse).map(ModelSource::Point)
}

fn checkpoint_list(cps: &[Checkpoint]) -> String {
    cps.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

/// Checks that `name` is known and `checkpoint` is one of its saved states.
/// Reads reference table files but never model weights.
pub fn resolve(name: &str, checkpoint: Checkpoint, cfg: &BackendConfig) -> Result<Resolved, BackendError> {
    let unknown_checkpoint = |available: String| BackendError::UnknownCheckpoint {
        model: name.into(),
        checkpoint,
        available,
    };
    let (source, backend) = if let Some(rest) = name.strip_prefix("ref:") {
        let source = match builtin(rest) {
            Some(s) => {
                if checkpoint != Checkpoint::Final {
                    return Err(unknown_checkpoint("final".into()));
                }
                s
            }
            None => {
                let path = cfg
                    .reference_models
                    .get(rest)
                    .ok_or_else(|| BackendError::UnknownModel(name.into()))?;
                let table = formats::parse_reference_table(&formats::read_text(path)?, path)?;
                if !table.checkpoints.contains(&checkpoint) {
                    return Err(unknown_checkpoint(checkpoint_list(&table.checkpoints)));
                }
                ModelSource::Table { path: path.clone() }
            }
        };
        (source, BackendKind::ReferenceTable)
    } else {
        let model = PythiaModel::parse(name).ok_or_else(|| BackendError::UnknownModel(name.into()))?;
        if !pythia_has_checkpoint(checkpoint) {
            return Err(unknown_checkpoint(PYTHIA_STEPS_TEXT.into()));
        }
        (ModelSource::Pythia(model), BackendKind::Transformer)
    };
    Ok(Resolved {
        handle: ModelHandle {
            model_name: name.into(),
            checkpoint,
            backend,
        },
        source,
    })
}

/// A loaded model.
pub struct OpenModel {
    pub handle: ModelHandle,
    pub lm: Box<dyn LanguageModel>,
}

/// Resolves and loads a model. Transformer weights are read eagerly.
pub fn open_model(name: &str, checkpoint: Checkpoint, cfg: &BackendConfig) -> Result<OpenModel, BackendError> {
    let resolved = resolve(name, checkpoint, cfg)?;
    let lm: Box<dyn LanguageModel> = match &resolved.source {
        ModelSource::Uniform(n) => Box::new(reference(ReferenceLm::uniform(*n))),
        ModelSource::Point(n) => Box::new(reference(ReferenceLm::point_mass(*n, TokenId(0)))),
        ModelSource::Table { path } => Box::new(formats::parse_reference_table(&formats::read_text(path)?, path)?.model),
        ModelSource::Pythia(p) => Box::new(load_pythia(p, checkpoint, cfg)?),
    };
    Ok(OpenModel {
        handle: resolved.handle,
        lm,
    })
}

fn reference(r: Result<ReferenceLm, polarity_core::LmError>) -> ReferenceLm {
    r.expect("built-in reference models are valid")
}

fn hub_roots(cfg: &BackendConfig) -> Vec<PathBuf> {
    let mut roots = vec![cfg.cache_root()];
    if let Some(dir) = std::env::var_os("HF_HUB_CACHE") {
        roots.push(PathBuf::from(dir));
    }
    if let Some(dir) = std::env::var_os("HF_HOME") {
        roots.push(PathBuf::from(dir).join("hub"));
    }
    roots.push(home().join(".cache").join("huggingface").join("hub"));
    roots.dedup();
    roots
}

fn has_config(dir: &Path) -> bool {
    dir.join("config.json").is_file()
}

/// Directories that might hold `name` at `rev`, in search order.
fn candidate_dirs(model: &PythiaModel, rev: &str, cfg: &BackendConfig) -> Vec<PathBuf> {
    let name = model.name();
    let root = cfg.cache_root();
    let mut dirs = vec![root.join(&name).join(rev), root.join("EleutherAI").join(&name).join(rev)];
    for hub in hub_roots(cfg) {
        let repo = hub.join(format!("models--EleutherAI--{name}"));
        let commit = std::fs::read_to_string(repo.join("refs").join(rev))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| rev.to_string());
        dirs.push(repo.join("snapshots").join(commit));
    }
    dirs
}

/// Finds a cached checkpoint directory for a Pythia model.
pub fn find_cached(model: &PythiaModel, checkpoint: Checkpoint, cfg: &BackendConfig) -> Result<PathBuf, BackendError> {
    let rev = revision(checkpoint);
    let dirs = candidate_dirs(model, &rev, cfg);
    dirs.iter().find(|d| has_config(d)).cloned().ok_or(BackendError::NotCached {
        model: model.name(),
        revision: rev,
        searched: dirs,
    })
}

fn load_pythia(model: &PythiaModel, checkpoint: Checkpoint, cfg: &BackendConfig) -> Result<NeoxLm, BackendError> {
    let dir = match find_cached(model, checkpoint, cfg) {
        Ok(d) => d,
        Err(_) if cfg.allow_download => download(model, checkpoint, cfg)?,
        Err(e) => return Err(e),
    };
    // Early revisions may lack tokenizer.json; the tokenizer is the same
    // for every step, so borrow the one from `main` if present.
    let tok_dir = if dir.join("tokenizer.json").is_file() {
        None
    } else {
        find_cached(model, Checkpoint::Final, cfg).ok()
    };
    NeoxLm::load(&dir, tok_dir.as_deref()).map_err(|source| BackendError::Load {
        model: model.name(),
        source,
    })
}

#[cfg(feature = "hub")]
fn download(model: &PythiaModel, checkpoint: Checkpoint, cfg: &BackendConfig) -> Result<PathBuf, BackendError> {
    use hf_hub::api::sync::ApiBuilder;
    use hf_hub::{Repo, RepoType};

    let fail = |msg: String| BackendError::Download {
        model: model.name(),
        msg,
    };
    let api = ApiBuilder::new()
        .with_cache_dir(cfg.cache_root())
        .with_progress(false)
        .build()
        .map_err(|e| fail(e.to_string()))?;
    let repo = api.repo(Repo::with_revision(model.repo_id(), RepoType::Model, revision(checkpoint)));
    let config = repo.get("config.json").map_err(|e| fail(e.to_string()))?;
    repo.get("tokenizer.json").map_err(|e| fail(e.to_string()))?;
    if repo.get("model.safetensors").is_err() {
        repo.get("pytorch_model.bin").map_err(|e| fail(e.to_string()))?;
    }
    Ok(config.parent().expect("file in snapshot dir").to_path_buf())
}

#[cfg(not(feature = "hub"))]
fn download(model: &PythiaModel, _checkpoint: Checkpoint, _cfg: &BackendConfig) -> Result<PathBuf, BackendError> {
    Err(BackendError::Download {
        model: model.name(),
        msg: "built without the `hub` feature".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pythia_names() {
        let m = PythiaModel::parse("EleutherAI/pythia-1.4b-deduped").unwrap();
        assert_eq!(m.size, "1.4b");
        assert!(m.deduped);
        assert_eq!(m.name(), "pythia-1.4b-deduped");
        assert!(PythiaModel::parse("pythia-160m").is_some());
        assert!(PythiaModel::parse("pythia-160").is_none());
        assert!(PythiaModel::parse("gpt2").is_none());
    }

    #[test]
    fn step_catalog() {
        let steps = pythia_steps();
        assert_eq!(steps.len(), 154);
        assert!(steps.iter().all(|&s| pythia_has_checkpoint(Checkpoint::Step(s))));
        for bad in [3, 1024, 1500, 144_000] {
            assert!(!pythia_has_checkpoint(Checkpoint::Step(bad)));
        }
        assert_eq!(revision(Checkpoint::Step(10_000)), "step10000");
        assert_eq!(revision(Checkpoint::Final), "main");
    }

    #[test]
    fn resolves_without_loading() {
        let cfg = BackendConfig::default();
        let r = resolve("pythia-160m-deduped", Checkpoint::Final, &cfg).unwrap();
        assert_eq!(r.handle.backend, BackendKind::Transformer);
        let r = resolve("pythia-1.4b-deduped", Checkpoint::Step(10_000), &cfg).unwrap();
        assert_eq!(r.handle.checkpoint, Checkpoint::Step(10_000));
        assert_eq!(r.parameters(), Some(1.4e9));
        let err = resolve("pythia-160m-deduped", Checkpoint::Step(1500), &cfg).unwrap_err();
        assert!(err.to_string().contains("1000 to 143000"), "{err}");
        assert!(matches!(resolve("pythia-160q", Checkpoint::Final, &cfg), Err(BackendError::UnknownModel(_))));
        assert!(matches!(resolve("ref:nope", Checkpoint::Final, &cfg), Err(BackendError::UnknownModel(_))));
    }

    #[test]
    fn builtin_reference_models() {
        let cfg = BackendConfig::default();
        let m = open_model("ref:uniform4", Checkpoint::Final, &cfg).unwrap();
        assert_eq!(m.handle.backend, BackendKind::ReferenceTable);
        assert_eq!(m.lm.vocab_size(), 4);
        assert!(open_model("ref:uniform0", Checkpoint::Final, &cfg).is_err());
        assert!(matches!(
            open_model("ref:point3", Checkpoint::Step(5), &cfg).err(),
            Some(BackendError::UnknownCheckpoint { .. })
        ));
    }

    #[test]
    fn missing_weights_name_search_paths() {
        let dir = std::env::temp_dir().join("polarity-empty-cache-for-test");
        let cfg = BackendConfig {
            cache_dir: Some(dir.clone()),
            ..Default::default()
        };
        let err = open_model("pythia-70m", Checkpoint::Step(512), &cfg).err().unwrap();
        match err {
            BackendError::NotCached { revision, searched, .. } => {
                assert_eq!(revision, "step512");
                assert_eq!(searched[0], dir.join("pythia-70m").join("step512"));
            }
            other => panic!("{other}"),
        }
    }
}
