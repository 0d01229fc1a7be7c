//! Stance-based data fact retrieval over tabular indicator data.
//!
//! A statement is explored as a tree: each expansion decomposes a node's
//! query into stance-tagged sub-queries, finds matching datasets by field
//! embedding, generates and validates SQL, extracts data facts from the
//! resulting sub-tables, computes and evaluates them, and ranks them by
//! stance and relevance.

pub mod config;
pub mod dataset;
pub mod embedding;
pub mod engine;
pub mod fact;
mod gate;
pub mod llm;
pub mod tree;

pub use config::Config;
pub use dataset::{Cell, Dataset, DatasetStore, FieldDescriptor, FieldKind, Literal, SubTable};
pub use engine::{chart_spec, ChartSpec, Derived, FactResult};
pub use fact::{DataFact, FactType};
pub use llm::{FactEvaluation, LlmGateway, Stance};
pub use tree::{RetrievalNode, RetrievalTree, Retriever, Session, StoredFact};
