//! Wiring shared by the server and the batch commands: configuration,
//! dataset loading and the choice of language-model backend.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use stancefact_core::dataset::{ingest_dataset, SourceFormat};
use stancefact_core::embedding::provider_from_config;
use stancefact_core::llm::{HttpChatBackend, LlmBackend, Recorder, ReplayBackend, ScriptedBackend};
use stancefact_core::{Config, DatasetStore, LlmGateway, Retriever};

use crate::error::ApiError;

/// Provenance recorded for CSV files loaded without an explicit source.
pub const DEFAULT_PROVENANCE: &str = "Sample data in World Development Indicators layout";

/// Where the model answers come from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum BackendChoice {
    /// The configured chat-completion endpoint.
    #[default]
    Live,
    /// A recorded transcript; prompts missing from it are errors.
    Replay(PathBuf),
    /// A rule file of canned answers.
    Script(PathBuf),
}

#[derive(Debug, Clone, Default)]
pub struct AppOptions {
    pub config: Config,
    /// Persistent dataset store directory.
    pub store: Option<PathBuf>,
    /// CSV files or directories of CSV files loaded in memory at start.
    pub csv: Vec<PathBuf>,
    pub backend: BackendChoice,
    /// Appends every model answer to this transcript.
    pub record: Option<PathBuf>,
}

impl AppOptions {
    /// Reference stored in session blobs to the transcript that produced them.
    pub fn transcript_ref(&self) -> Option<String> {
        match (&self.record, &self.backend) {
            (Some(p), _) | (None, BackendChoice::Replay(p)) => Some(p.display().to_string()),
            _ => None,
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Config, ApiError> {
    match path {
        Some(p) => Config::load(p).map_err(|e| ApiError::bad_request("CONFIG", e.to_string())),
        None => Ok(Config::default()),
    }
}

/// Every `*.csv` under `path` (or `path` itself), sorted by file name.
fn csv_files(path: &Path) -> Result<Vec<PathBuf>, ApiError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| ApiError::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads one CSV file; the dataset is named after the file stem.
pub fn read_csv(path: &Path, format: SourceFormat) -> Result<stancefact_core::Dataset, ApiError> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| ApiError::bad_request("BAD_PATH", format!("{} has no file name", path.display())))?;
    let file = std::fs::File::open(path).map_err(|e| ApiError::io(path, e))?;
    ingest_dataset(file, name, DEFAULT_PROVENANCE, format).map_err(ApiError::from)
}

pub fn open_store(opts: &AppOptions) -> Result<DatasetStore, ApiError> {
    let mut store = match &opts.store {
        Some(dir) => DatasetStore::open(dir).map_err(ApiError::from)?,
        None => DatasetStore::new(),
    };
    for p in &opts.csv {
        for f in csv_files(p)? {
            store.insert_transient(read_csv(&f, SourceFormat::Table)?);
        }
    }
    Ok(store)
}

pub fn build_backend(opts: &AppOptions) -> Result<Arc<dyn LlmBackend>, ApiError> {
    let base: Arc<dyn LlmBackend> = match &opts.backend {
        BackendChoice::Live => Arc::new(HttpChatBackend::from_config(&opts.config.llm)?),
        BackendChoice::Replay(p) => Arc::new(ReplayBackend::load(p)?),
        BackendChoice::Script(p) => Arc::new(ScriptedBackend::load(p)?),
    };
    Ok(match &opts.record {
        Some(p) => Arc::new(Recorder::open(base, p)?),
        None => base,
    })
}

pub fn build_retriever(opts: &AppOptions) -> Result<Retriever, ApiError> {
    let store = open_store(opts)?;
    let embedder = provider_from_config(&opts.config.embedding)?;
    let llm = LlmGateway::new(build_backend(opts)?, opts.config.retrieval.parse_repairs);
    Ok(Retriever::new(store, embedder, llm, opts.config.retrieval.clone())?)
}
