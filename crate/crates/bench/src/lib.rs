//! Shared fixtures for the benchmarks and the acceptance suite: random
//! small tables and facts, and a retriever over the bundled sample data.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use stancefact_core::config::RetrievalConfig;
use stancefact_core::dataset::{execute_query, ingest_dataset, SourceFormat};
use stancefact_core::embedding::MockEmbedder;
use stancefact_core::engine::compute_fact;
use stancefact_core::fact::{validate_fact, Aggregate, FilterClause, Measure};
use stancefact_core::llm::ScriptedBackend;
use stancefact_core::{DataFact, DatasetStore, FactType, Literal, LlmGateway, Retriever, SubTable};

/// Statement of the bundled income inequality walkthrough.
pub const CASE_STATEMENT: &str = "Global income inequality is widening, with significant disparities between nations.";

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn sample_dir() -> PathBuf {
    data_dir().join("wdi_sample")
}

pub fn case_script() -> PathBuf {
    data_dir().join("scripts/income_inequality.json")
}

pub fn case_transcript() -> PathBuf {
    data_dir().join("transcripts/income_inequality.jsonl")
}

pub fn case_tree() -> PathBuf {
    data_dir().join("transcripts/income_inequality.tree.json")
}

/// The sample CSVs, in memory, in file name order.
pub fn sample_store() -> DatasetStore {
    let mut files: Vec<PathBuf> = std::fs::read_dir(sample_dir())
        .expect("sample data directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut store = DatasetStore::new();
    for p in files {
        let name = p.file_stem().and_then(|s| s.to_str()).expect("file stem").to_string();
        let file = std::fs::File::open(&p).expect("sample csv");
        let d = ingest_dataset(file, &name, "sample", SourceFormat::Table).expect("sample csv parses");
        store.insert_transient(d);
    }
    store
}

/// A retriever over the sample data answering from a rule file.
pub fn scripted_retriever(script: &Path) -> Retriever {
    let backend = ScriptedBackend::load(script).expect("script loads");
    let config = RetrievalConfig::default();
    let llm = LlmGateway::new(Arc::new(backend), config.parse_repairs);
    Retriever::new(sample_store(), Arc::new(MockEmbedder::default()), llm, config).expect("index builds")
}

const REGIONS: [&str; 4] = ["North", "South", "East", "West"];
const SECTORS: [&str; 2] = ["farm", "mill"];

/// A random table of `1..=max_rows` rows with a categorical region and
/// sector, a temporal year and two numerical measures. Region and year
/// pairs are distinct.
pub fn random_table<R: Rng>(rng: &mut R, max_rows: usize) -> SubTable {
    let n = rng.gen_range(1..=max_rows);
    let mut pairs: Vec<(usize, i64)> = Vec::new();
    for r in 0..REGIONS.len() {
        for y in 0..4 {
            pairs.push((r, 2000 + y));
        }
    }
    pairs.shuffle(rng);
    pairs.truncate(n);
    let mut csv = String::from("region,sector,year,v,w\n");
    for (r, y) in pairs {
        let v: f64 = (rng.gen_range(-2000..20000) as f64) / 100.0;
        let w: f64 = (rng.gen_range(0..5000) as f64) / 10.0;
        let s = SECTORS.choose(rng).expect("sectors");
        csv.push_str(&format!("{},{s},{y},{v},{w}\n", REGIONS[r]));
    }
    let d = ingest_dataset(csv.as_bytes(), "t", "random", SourceFormat::Table).expect("random csv parses");
    execute_query("SELECT * FROM t", &d).expect("select all")
}

fn random_clause<R: Rng>(rng: &mut R, t: &SubTable) -> FilterClause {
    let row = &t.rows[rng.gen_range(0..t.rows.len())];
    match rng.gen_range(0..3) {
        0 => FilterClause::new("region", Literal::Text(row[0].render())),
        1 => FilterClause::new("sector", Literal::Text(row[1].render())),
        _ => FilterClause::new("year", Literal::Number(row[2].as_f64().expect("year"))),
    }
}

/// A random fact over a [`random_table`]; not necessarily valid.
pub fn random_fact<R: Rng>(rng: &mut R, t: &SubTable) -> DataFact {
    let fact_type = *FactType::ALL.choose(rng).expect("types");
    let aggregates = [Aggregate::None, Aggregate::Sum, Aggregate::Avg, Aggregate::Min, Aggregate::Max, Aggregate::Count];
    let agg = if rng.gen_bool(0.5) { Aggregate::None } else { *aggregates.choose(rng).expect("aggregates") };
    let mut measure = vec![Measure { aggregate: agg, field: "v".into() }];
    if fact_type == FactType::Association {
        measure.push(Measure { aggregate: agg, field: "w".into() });
    }
    let breakdown = if fact_type == FactType::Trend || rng.gen_bool(0.4) { "year" } else { "region" };
    let subspace_len = match fact_type {
        FactType::Trend => 1,
        _ => rng.gen_range(0..=1),
    };
    let subspace: Vec<FilterClause> = (0..subspace_len).map(|_| random_clause(rng, t)).collect();
    let focus_len = match fact_type {
        FactType::Difference => 2,
        FactType::Proportion => 1,
        FactType::Rank | FactType::Extreme | FactType::Outlier => rng.gen_range(0..=1),
        _ => 0,
    };
    let focus: Vec<FilterClause> = (0..focus_len)
        .map(|_| {
            let row = &t.rows[rng.gen_range(0..t.rows.len())];
            if breakdown == "year" {
                FilterClause::new("year", Literal::Number(row[2].as_f64().expect("year")))
            } else {
                FilterClause::new("region", Literal::Text(row[0].render()))
            }
        })
        .collect();
    DataFact { fact_type, measure, breakdown: vec![breakdown.into()], subspace, focus, description: String::new() }
}

/// Draws facts until one validates and computes, up to `attempts` draws.
pub fn random_valid_fact<R: Rng>(rng: &mut R, t: &SubTable, attempts: usize) -> Option<DataFact> {
    (0..attempts).find_map(|_| {
        let f = random_fact(rng, t);
        (validate_fact(&f, t).ok && compute_fact(&f, t).is_ok()).then_some(f)
    })
}
