//! End-to-end orchestration: ingestion and query answering on top of the
//! individual stages. The CLI and the benchmark harness both drive the
//! engine through this module.

use std::sync::Arc;

use thiserror::Error;

use crate::clients::{
    extract_entities, propose_concepts, BinaryScorer, ClientConfig, ClientError, ConceptProposer,
    EntityExtractor, EpisodeRef, Generator, HttpClients, QueryConceptParser, SyntheticClients,
    SyntheticWorld, TextEncoder, TokenCounter, VisualEncoder, WhitespaceTokenCounter,
};
use crate::config::{BackendKind, EngineConfig};
use crate::graph::{GraphError, NodeId, PolarGraph};
use crate::index::{build_embedding, IndexError, Patch, VectorIndex};
use crate::partition::{partition_spectrum, Partition, PartitionError};
use crate::retrieval::{
    assemble_context, parse_query, retrieve, EvidenceItem, evidence_items, QueryConstraints,
    RankTuple, RetrievalError, RetrievalOptions,
};
use crate::scoring::{
    score_concepts, ConfidenceSpectrum, ScoringError, ScoringOptions, TemplateEnsemble,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// All model services behind one handle, trait-object style so backends mix
/// freely in tests.
#[derive(Clone)]
pub struct ClientBundle {
    pub scorer: Arc<dyn BinaryScorer>,
    pub proposer: Arc<dyn ConceptProposer>,
    pub extractor: Arc<dyn EntityExtractor>,
    pub parser: Arc<dyn QueryConceptParser>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub visual_encoder: Arc<dyn VisualEncoder>,
    pub counter: Arc<dyn TokenCounter>,
    pub generator: Arc<dyn Generator>,
}

impl ClientBundle {
    pub fn synthetic(world: Arc<SyntheticWorld>, dim: usize) -> Self {
        let clients = Arc::new(SyntheticClients::new(world, dim));
        Self {
            scorer: clients.clone(),
            proposer: clients.clone(),
            extractor: clients.clone(),
            parser: clients.clone(),
            text_encoder: clients.clone(),
            visual_encoder: clients.clone(),
            counter: Arc::new(WhitespaceTokenCounter),
            generator: clients,
        }
    }

    pub fn http(config: ClientConfig, dim: usize) -> Self {
        let clients = Arc::new(HttpClients::new(config, dim));
        Self {
            scorer: clients.clone(),
            proposer: clients.clone(),
            extractor: clients.clone(),
            parser: clients.clone(),
            text_encoder: clients.clone(),
            visual_encoder: clients.clone(),
            counter: Arc::new(WhitespaceTokenCounter),
            generator: clients,
        }
    }

    pub fn for_config(config: &EngineConfig) -> Self {
        match config.backend {
            BackendKind::Synthetic => {
                let world = Arc::new(SyntheticWorld::new(config.seed, config.noise_sigma));
                Self::synthetic(world, config.dim)
            }
            BackendKind::Http => Self::http(config.client.clone(), config.dim),
        }
    }
}

pub fn ensemble_for(config: &EngineConfig) -> Result<TemplateEnsemble, ScoringError> {
    if config.templates.is_empty() {
        Ok(TemplateEnsemble::default_ensemble())
    } else {
        TemplateEnsemble::from_file(&config.templates)
    }
}

/// What one ingested episode produced.
#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub node: NodeId,
    pub spectrum: ConfidenceSpectrum,
    pub partition: Partition,
}

/// Full ingestion of one visual episode: propose candidates, verify them
/// against the ensemble, partition the spectrum, store the node with its
/// polarized edges, and index the hybrid embedding.
pub fn ingest_visual_episode(
    graph: &mut PolarGraph,
    index: &mut VectorIndex,
    clients: &ClientBundle,
    config: &EngineConfig,
    ensemble: &TemplateEnsemble,
    episode: &EpisodeRef,
    patches: &[Patch],
) -> Result<IngestOutcome, PipelineError> {
    let candidates = propose_concepts(episode, clients.proposer.as_ref(), config.client.max_retries)?;
    let spectrum = if candidates.is_empty() {
        ConfidenceSpectrum {
            episode_id: episode.id.clone(),
            scores: Default::default(),
            template_count: ensemble.len(),
        }
    } else {
        score_concepts(
            episode,
            &candidates,
            ensemble,
            clients.scorer.as_ref(),
            ScoringOptions {
                max_retries: config.client.max_retries,
                max_parallel: config.client.max_parallel,
            },
        )?
    };
    let partition = partition_spectrum(&spectrum, config.kappa)?;

    let uri = episode.uri.clone().unwrap_or_else(|| episode.id.clone());
    let visual_vec = clients.visual_encoder.encode_visual(episode)?;
    let embedding = build_embedding(
        &visual_vec,
        patches,
        &partition.positive,
        &partition.negative,
        clients.text_encoder.as_ref(),
    )?;
    let row = index.insert(&uri, embedding)?;
    let node = graph.add_visual_episode(&uri, &partition, Some(row))?;
    Ok(IngestOutcome { node, spectrum, partition })
}

/// Ingests one text chunk: extract entities, store the node with its ALIGN
/// edges, and index the content vector.
pub fn ingest_text_chunk(
    graph: &mut PolarGraph,
    index: &mut VectorIndex,
    clients: &ClientBundle,
    content: &str,
) -> Result<NodeId, PipelineError> {
    let entities = extract_entities(content, clients.extractor.as_ref());
    let node = graph.add_text_chunk(content, &entities)?;
    let vector = clients.text_encoder.encode_text(content)?;
    index.insert_content(&node.key, &vector)?;
    Ok(node)
}

/// A fully answered query: parsed constraints, ranked results, rendered
/// evidence, the assembled context, and the image URIs of retrieved visual
/// nodes in rank order (for multimodal generators).
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub constraints: QueryConstraints,
    pub results: Vec<RankTuple>,
    pub evidence: Vec<EvidenceItem>,
    pub segments: Vec<String>,
    pub image_refs: Vec<String>,
}

pub fn run_query(
    graph: &PolarGraph,
    index: &VectorIndex,
    clients: &ClientBundle,
    config: &EngineConfig,
    raw_query: &str,
    strict: bool,
) -> Result<QueryOutcome, PipelineError> {
    let constraints = parse_query(raw_query, clients.parser.as_ref(), clients.text_encoder.as_ref())?;
    let options = RetrievalOptions { strict, ..Default::default() };
    let results = retrieve(&constraints, config.k, graph, index, options)?;
    let evidence = evidence_items(&results, &constraints, graph);
    let segments = assemble_context(
        &results,
        &config.system_instruction,
        raw_query,
        &constraints,
        graph,
        config.token_cap,
        clients.counter.as_ref(),
    );
    let image_refs = results
        .iter()
        .filter_map(|t| graph.visual(&t.node.key).map(|v| v.source_uri.clone()))
        .collect();
    Ok(QueryOutcome { constraints, results, evidence, segments, image_refs })
}
