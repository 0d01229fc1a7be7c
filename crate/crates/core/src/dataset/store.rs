use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ingest::{sample_values, to_cell};
use super::{Dataset, FieldDescriptor, FieldKind, StoreError};

/// In-memory catalog of datasets, optionally mirrored to a directory with
/// one `<id>/meta.json` + `<id>/rows.csv` pair per dataset.
#[derive(Debug, Default, Clone)]
pub struct DatasetStore {
    datasets: BTreeMap<String, Dataset>,
    root: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    name: String,
    provenance: String,
    fields: Vec<MetaField>,
}

#[derive(Serialize, Deserialize)]
struct MetaField {
    name: String,
    kind: FieldKind,
}

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a persisted store and loads every dataset.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut datasets = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let d = load_dir(&dir)?;
            datasets.insert(d.id.clone(), d);
        }
        Ok(Self { datasets, root: Some(root) })
    }

    /// Inserts or replaces the dataset with the same id; persists it when
    /// the store is directory-backed.
    pub fn insert(&mut self, dataset: Dataset) -> Result<&Dataset, StoreError> {
        if let Some(root) = &self.root {
            save_dir(&root.join(&dataset.id), &dataset)?;
        }
        let id = dataset.id.clone();
        self.datasets.insert(id.clone(), dataset);
        Ok(&self.datasets[&id])
    }

    /// Inserts or replaces a dataset in memory only, even when the store
    /// is directory-backed.
    pub fn insert_transient(&mut self, dataset: Dataset) -> &Dataset {
        let id = dataset.id.clone();
        self.datasets.insert(id.clone(), dataset);
        &self.datasets[&id]
    }

    pub fn get(&self, id: &str) -> Option<&Dataset> {
        self.datasets.get(id)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &Dataset> {
        self.datasets.values()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Every field of every dataset, ordered by (dataset id, field name).
    pub fn list_fields(&self) -> Vec<FieldDescriptor> {
        let mut out: Vec<FieldDescriptor> = self
            .datasets
            .values()
            .flat_map(|d| d.fields.iter().cloned())
            .collect();
        out.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id).then_with(|| a.name.cmp(&b.name)));
        out
    }
}

fn save_dir(dir: &Path, d: &Dataset) -> Result<(), StoreError> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        id: d.id.clone(),
        name: d.name.clone(),
        provenance: d.provenance.clone(),
        fields: d
            .fields
            .iter()
            .map(|f| MetaField { name: f.name.clone(), kind: f.kind })
            .collect(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
    w.write_record(d.fields.iter().map(|f| f.name.as_str()))?;
    for row in &d.rows {
        w.write_record(row.iter().map(|c| c.render()))?;
    }
    w.flush()?;
    Ok(())
}

fn load_dir(dir: &Path) -> Result<Dataset, StoreError> {
    let corrupt = |message: String| StoreError::Corrupt {
        path: dir.display().to_string(),
        message,
    };
    let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(dir.join("rows.csv"))?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let names: Vec<&str> = meta.fields.iter().map(|f| f.name.as_str()).collect();
    if header != names {
        return Err(corrupt("rows.csv header does not match meta.json".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != meta.fields.len() {
            return Err(corrupt(format!("ragged row {}", rows.len() + 1)));
        }
        rows.push(
            rec.iter()
                .zip(&meta.fields)
                .map(|(raw, f)| to_cell(raw, f.kind))
                .collect::<Vec<_>>(),
        );
    }
    let fields = meta
        .fields
        .iter()
        .enumerate()
        .map(|(col, f)| FieldDescriptor {
            name: f.name.clone(),
            kind: f.kind,
            dataset_id: meta.id.clone(),
            sample_values: sample_values(&rows, col),
        })
        .collect();
    Ok(Dataset {
        id: meta.id,
        name: meta.name,
        fields,
        rows,
        provenance: meta.provenance,
    })
}
