//! Contextual pill recognition assisted by a prescription knowledge graph.
//!
//! The pipeline: build a co-prescription graph from a prescription corpus
//! ([`mkg`]), embed it with random walks and skip-gram ([`embed`]), then train
//! a visual backbone whose crops are classified with help from the graph
//! embeddings of the other pills in the same photo ([`backbone`], [`fusion`],
//! [`losses`], [`train`]).

pub mod augment;
pub mod backbone;
pub mod config;
pub mod embed;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod mkg;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rx;
pub mod synth;
pub mod train;

pub use config::ExperimentConfig;
pub use embed::{NodeEmbeddingMatrix, WalkConfig};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossReport};
pub use metrics::EvalReport;
pub use mkg::{EdgeWeighting, MedicalKnowledgeGraph};
pub use model::{ModelConfig, PillNet, Variant};
pub use rx::{Corpus, PillDictionary, PrescriptionRecord};
pub use synth::{Dataset, IntakeSample, SynthConfig};
pub use train::{GraphConfig, Stage2Config, TrainConfig};
