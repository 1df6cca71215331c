//! Polarized graph memory engine.
//!
//! Converts noisy perceptual confidence scores into discrete logical
//! constraints (presence / absence / uncertain), stores them in a typed
//! graph with inhibitory `NOT_HAS` edges, and answers queries with a
//! lexicographical logic-dominant ranking in which logical consistency
//! strictly precedes semantic similarity.
//!
//! Pipeline, end to end:
//!
//! 1. [`scoring`] — verify candidate concepts against an episode with an
//!    ensemble of binary interrogation templates, yielding a calibrated
//!    confidence spectrum per episode.
//! 2. [`partition`] — split the spectrum into positive / negative /
//!    uncertain sets via variance-maximizing thresholding with virtual
//!    0/1 anchors and a dynamic uncertainty margin.
//! 3. [`graph`] — persist the result as a heterogeneous graph with typed
//!    `HAS` / `NOT_HAS` / `ALIGN` edges.
//! 4. [`index`] — attach hybrid embeddings (holistic, local patches,
//!    semantic-state) and serve exact cosine top-k search.
//! 5. [`retrieval`] — rank memories by the `(logic state, similarity)`
//!    tuple, suppress constraint violations, and assemble the evidence
//!    context for a downstream generator.
//!
//! [`clients`] abstracts every external model service (with deterministic
//! synthetic backends for hermetic runs), [`harness`] generates seeded
//! synthetic worlds and runs the ablation protocol, and [`pipeline`] wires
//! the stages together for the CLI.

pub mod clients;
pub mod config;
pub mod graph;
pub mod harness;
pub mod index;
pub mod partition;
pub mod pipeline;
pub mod retrieval;
pub mod scoring;

pub use clients::{ClientConfig, ClientError, EpisodeRef, SyntheticWorld};
pub use config::{BenchSettings, ConfigError, EngineConfig};
pub use graph::{Edge, EdgeKind, GraphError, GraphStats, NodeId, NodeKind, PolarGraph};
pub use index::{HybridEmbedding, IndexError, Patch, SearchField, VectorIndex};
pub use partition::{Partition, PartitionError, ThresholdResult};
pub use retrieval::{
    EvidenceItem, EvidenceStatus, QueryConstraints, RankTuple, RetrievalError, RetrievalOptions,
};
pub use scoring::{ConceptCandidate, ConfidenceSpectrum, ScoringError, TemplateEnsemble};
