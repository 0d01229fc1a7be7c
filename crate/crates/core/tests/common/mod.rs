//! Sample data and scripted model shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use stancefact_core::config::RetrievalConfig;
use stancefact_core::dataset::{ingest_dataset, SourceFormat};
use stancefact_core::embedding::MockEmbedder;
use stancefact_core::llm::{LlmBackend, ScriptedBackend};
use stancefact_core::{DatasetStore, LlmGateway, Retriever};

pub const STATEMENT: &str = "Global income inequality is widening, with significant disparities between nations.";

pub fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

pub fn store() -> DatasetStore {
    let mut files: Vec<PathBuf> = std::fs::read_dir(data("wdi_sample"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let mut store = DatasetStore::new();
    for p in files {
        let name = p.file_stem().unwrap().to_str().unwrap().to_string();
        let d = ingest_dataset(std::fs::File::open(&p).unwrap(), &name, "sample", SourceFormat::Table).unwrap();
        store.insert_transient(d);
    }
    store
}

pub fn script() -> ScriptedBackend {
    ScriptedBackend::load(&data("scripts/income_inequality.json")).unwrap()
}

pub fn retriever(backend: Arc<dyn LlmBackend>) -> Retriever {
    let config = RetrievalConfig { parallel_subqueries: false, ..RetrievalConfig::default() };
    Retriever::new(store(), Arc::new(MockEmbedder::default()), LlmGateway::new(backend, 2), config).unwrap()
}

pub fn scripted() -> Retriever {
    retriever(Arc::new(script()))
}
