//! Polarized heterogeneous graph.
//!
//! Three node kinds — visual episodes, textual chunks, concepts — and three
//! edge kinds. `HAS` records verified presence, `NOT_HAS` records verified
//! absence as a first-class inhibitory fact, `ALIGN` ties a text chunk to a
//! concept that already carries logical evidence. Uncertain concepts stay
//! on the visual node without edges, available for semantic matching but
//! never for logical enforcement.
//!
//! Persistence is JSON Lines with canonical ordering: a version header,
//! nodes sorted by (kind, key), then edges sorted componentwise, so equal
//! ingestion histories serialize byte-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::Partition;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("episode already ingested: {0}")]
    DuplicateEpisode(String),
    #[error("text chunk content is empty")]
    EmptyContent,
    #[error("partition sets are not disjoint (concept {0:?})")]
    OverlappingPartition(String),
    #[error("corrupt graph file at line {line}: {reason}")]
    CorruptFile { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeKind {
    Visual,
    Textual,
    Concept,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Visual => f.write_str("VISUAL"),
            NodeKind::Textual => f.write_str("TEXTUAL"),
            NodeKind::Concept => f.write_str("CONCEPT"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub key: String,
}

impl NodeId {
    pub fn visual(key: impl Into<String>) -> Self {
        Self { kind: NodeKind::Visual, key: key.into() }
    }

    pub fn textual(key: impl Into<String>) -> Self {
        Self { kind: NodeKind::Textual, key: key.into() }
    }

    pub fn concept(key: impl Into<String>) -> Self {
        Self { kind: NodeKind::Concept, key: key.into() }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.key)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    Has,
    NotHas,
    Align,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeKind::Has => f.write_str("HAS"),
            EdgeKind::NotHas => f.write_str("NOT_HAS"),
            EdgeKind::Align => f.write_str("ALIGN"),
        }
    }
}

/// Typed edge into a concept node. `HAS`/`NOT_HAS` originate at visual
/// nodes, `ALIGN` at textual nodes; no (src, dst) pair carries both `HAS`
/// and `NOT_HAS`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: NodeId,
    pub dst_key: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualNode {
    pub key: String,
    pub source_uri: String,
    pub positive_concepts: BTreeSet<String>,
    pub negative_concepts: BTreeSet<String>,
    pub uncertain_concepts: BTreeSet<String>,
    pub embedding_ref: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextualNode {
    pub key: String,
    pub content: String,
    pub entities: BTreeSet<String>,
    /// Entities that matched a logically-covered concept at ingestion time;
    /// exactly the ALIGN edge targets of this chunk.
    pub linked: BTreeSet<String>,
}

/// In-neighborhood of one concept, split by edge kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptNeighborhood {
    pub has_sources: BTreeSet<NodeId>,
    pub not_has_sources: BTreeSet<NodeId>,
    pub align_sources: BTreeSet<NodeId>,
}

impl ConceptNeighborhood {
    pub fn has_logical_edge(&self) -> bool {
        !self.has_sources.is_empty() || !self.not_has_sources.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub verifiable_coverage: f64,
    pub max_has_per_image: usize,
    pub max_not_has_per_image: usize,
    pub total_not_has: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PolarGraph {
    visual: BTreeMap<String, VisualNode>,
    textual: BTreeMap<String, TextualNode>,
    concepts: BTreeSet<String>,
    edges: BTreeSet<Edge>,
    by_concept: BTreeMap<String, ConceptNeighborhood>,
    text_seq: u64,
}

impl PolarGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn visual_nodes(&self) -> impl Iterator<Item = &VisualNode> {
        self.visual.values()
    }

    pub fn textual_nodes(&self) -> impl Iterator<Item = &TextualNode> {
        self.textual.values()
    }

    pub fn concept_keys(&self) -> impl Iterator<Item = &String> {
        self.concepts.iter()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn visual(&self, key: &str) -> Option<&VisualNode> {
        self.visual.get(key)
    }

    pub fn textual(&self, key: &str) -> Option<&TextualNode> {
        self.textual.get(key)
    }

    pub fn visual_count(&self) -> usize {
        self.visual.len()
    }

    pub fn textual_count(&self) -> usize {
        self.textual.len()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Memory nodes in canonical order: visual nodes, then textual nodes,
    /// each sorted by key. Concepts are hubs, not memories.
    pub fn memory_node_ids(&self) -> Vec<NodeId> {
        self.visual
            .keys()
            .map(|k| NodeId::visual(k.clone()))
            .chain(self.textual.keys().map(|k| NodeId::textual(k.clone())))
            .collect()
    }

    /// Ingests one partitioned episode: the visual node, any missing
    /// concept nodes, one `HAS` edge per positive concept and one `NOT_HAS`
    /// per negative concept. Uncertain concepts are recorded on the node
    /// but receive no edges. Atomic: validation happens before any state
    /// changes.
    pub fn add_visual_episode(
        &mut self,
        source_uri: &str,
        partition: &Partition,
        embedding_ref: Option<u64>,
    ) -> Result<NodeId, GraphError> {
        if self.visual.contains_key(source_uri) {
            return Err(GraphError::DuplicateEpisode(source_uri.to_string()));
        }
        let overlap = partition
            .positive
            .intersection(&partition.negative)
            .chain(partition.positive.intersection(&partition.uncertain))
            .chain(partition.negative.intersection(&partition.uncertain))
            .next();
        if let Some(concept) = overlap {
            return Err(GraphError::OverlappingPartition(concept.clone()));
        }

        let key = source_uri.to_string();
        let node = VisualNode {
            key: key.clone(),
            source_uri: source_uri.to_string(),
            positive_concepts: partition.positive.clone(),
            negative_concepts: partition.negative.clone(),
            uncertain_concepts: partition.uncertain.clone(),
            embedding_ref,
        };
        let id = NodeId::visual(key.clone());
        for concept in partition
            .positive
            .iter()
            .chain(&partition.negative)
            .chain(&partition.uncertain)
        {
            self.concepts.insert(concept.clone());
        }
        for concept in &partition.positive {
            self.insert_edge(id.clone(), concept.clone(), EdgeKind::Has);
        }
        for concept in &partition.negative {
            self.insert_edge(id.clone(), concept.clone(), EdgeKind::NotHas);
        }
        self.visual.insert(key, node);
        Ok(id)
    }

    /// Ingests a text chunk. Entities that already exist as concepts with
    /// at least one logical (`HAS`/`NOT_HAS`) edge get an `ALIGN` edge;
    /// the rest are stored on the node unlinked.
    pub fn add_text_chunk(
        &mut self,
        content: &str,
        entities: &BTreeSet<String>,
    ) -> Result<NodeId, GraphError> {
        if content.is_empty() {
            return Err(GraphError::EmptyContent);
        }
        let key = format!("t{:06}", self.text_seq);
        self.text_seq += 1;
        let id = NodeId::textual(key.clone());

        let mut linked = BTreeSet::new();
        for entity in entities {
            let covered = self
                .by_concept
                .get(entity)
                .map(ConceptNeighborhood::has_logical_edge)
                .unwrap_or(false);
            if covered {
                self.insert_edge(id.clone(), entity.clone(), EdgeKind::Align);
                linked.insert(entity.clone());
            }
        }
        self.textual.insert(
            key,
            TextualNode {
                key: id.key.clone(),
                content: content.to_string(),
                entities: entities.clone(),
                linked,
            },
        );
        Ok(id)
    }

    /// Maintenance pass: re-checks every stored entity of every text chunk
    /// against the current concept coverage and adds the ALIGN edges that
    /// ingestion-time lazy linking missed. Never removes edges.
    pub fn relink_text(&mut self) -> usize {
        let mut added = 0;
        let chunk_keys: Vec<String> = self.textual.keys().cloned().collect();
        for key in chunk_keys {
            let id = NodeId::textual(key.clone());
            let pending: Vec<String> = {
                let node = &self.textual[&key];
                node.entities
                    .iter()
                    .filter(|e| !node.linked.contains(*e))
                    .filter(|e| {
                        self.by_concept
                            .get(*e)
                            .map(ConceptNeighborhood::has_logical_edge)
                            .unwrap_or(false)
                    })
                    .cloned()
                    .collect()
            };
            for entity in pending {
                self.insert_edge(id.clone(), entity.clone(), EdgeKind::Align);
                self.textual.get_mut(&key).unwrap().linked.insert(entity);
                added += 1;
            }
        }
        added
    }

    pub fn set_embedding_ref(&mut self, key: &str, embedding_ref: u64) -> bool {
        match self.visual.get_mut(key) {
            Some(node) => {
                node.embedding_ref = Some(embedding_ref);
                true
            }
            None => false,
        }
    }

    fn insert_edge(&mut self, src: NodeId, dst_key: String, kind: EdgeKind) {
        let hood = self.by_concept.entry(dst_key.clone()).or_default();
        match kind {
            EdgeKind::Has => hood.has_sources.insert(src.clone()),
            EdgeKind::NotHas => hood.not_has_sources.insert(src.clone()),
            EdgeKind::Align => hood.align_sources.insert(src.clone()),
        };
        self.edges.insert(Edge { src, dst_key, kind });
    }

    /// Edge-partitioned in-neighborhood of a concept; empty sets for
    /// unknown concepts.
    pub fn concept_neighborhood(&self, concept: &str) -> ConceptNeighborhood {
        self.by_concept.get(concept).cloned().unwrap_or_default()
    }

    pub fn compute_stats(&self) -> GraphStats {
        let mut covered = 0usize;
        let mut max_has = 0usize;
        let mut max_not_has = 0usize;
        let mut total_not_has = 0usize;
        for node in self.visual.values() {
            let has = node.positive_concepts.len();
            let not_has = node.negative_concepts.len();
            if has + not_has > 0 {
                covered += 1;
            }
            max_has = max_has.max(has);
            max_not_has = max_not_has.max(not_has);
            total_not_has += not_has;
        }
        let verifiable_coverage = if self.visual.is_empty() {
            0.0
        } else {
            covered as f64 / self.visual.len() as f64
        };
        GraphStats {
            verifiable_coverage,
            max_has_per_image: max_has,
            max_not_has_per_image: max_not_has,
            total_not_has,
        }
    }

    /// Serializes the graph to canonical JSON Lines.
    pub fn save_to_string(&self) -> String {
        fn push<R: Serialize>(out: &mut String, record: &R) {
            out.push_str(&serde_json::to_string(record).expect("graph records serialize"));
            out.push('\n');
        }
        let mut out = String::new();
        push(&mut out, &HeaderRecord { v: GRAPH_FORMAT_VERSION });
        for node in self.visual.values() {
            push(&mut out, &NodeRecord::from_visual(node));
        }
        for node in self.textual.values() {
            push(&mut out, &NodeRecord::from_textual(node));
        }
        for concept in &self.concepts {
            push(&mut out, &NodeRecord::concept(concept));
        }
        for edge in &self.edges {
            push(&mut out, &EdgeRecord::from_edge(edge));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(self.save_to_string().as_bytes())?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        Self::load_from_reader(BufReader::new(file))
    }

    pub fn load_from_str(text: &str) -> Result<Self, GraphError> {
        Self::load_from_reader(text.as_bytes())
    }

    fn load_from_reader(reader: impl BufRead) -> Result<Self, GraphError> {
        let corrupt = |line: usize, reason: String| GraphError::CorruptFile { line, reason };
        let mut graph = PolarGraph::new();
        let mut saw_header = false;
        let mut visual_lines: BTreeMap<String, usize> = BTreeMap::new();

        for (index, line) in reader.lines().enumerate() {
            let line_no = index + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                let header: HeaderRecord = serde_json::from_str(&line)
                    .map_err(|e| corrupt(line_no, format!("expected header record: {e}")))?;
                if header.v != GRAPH_FORMAT_VERSION {
                    return Err(corrupt(
                        line_no,
                        format!("unsupported format version {}", header.v),
                    ));
                }
                saw_header = true;
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| corrupt(line_no, format!("malformed record: {e}")))?;
            match record {
                Record::Node(node) => match node.kind {
                    NodeKind::Visual => {
                        let key = node.key.clone();
                        if graph.visual.contains_key(&key) {
                            return Err(corrupt(line_no, format!("duplicate visual node {key}")));
                        }
                        let positive = node.positive.unwrap_or_default();
                        let negative = node.negative.unwrap_or_default();
                        let uncertain = node.uncertain.unwrap_or_default();
                        let overlap = positive
                            .intersection(&negative)
                            .chain(positive.intersection(&uncertain))
                            .chain(negative.intersection(&uncertain))
                            .next();
                        if let Some(concept) = overlap {
                            return Err(corrupt(
                                line_no,
                                format!("visual node {key} lists {concept:?} in two concept sets"),
                            ));
                        }
                        visual_lines.insert(key.clone(), line_no);
                        graph.visual.insert(
                            key.clone(),
                            VisualNode {
                                key,
                                source_uri: node.source_uri.unwrap_or_default(),
                                positive_concepts: positive,
                                negative_concepts: negative,
                                uncertain_concepts: uncertain,
                                embedding_ref: node.embedding_ref,
                            },
                        );
                    }
                    NodeKind::Textual => {
                        let key = node.key.clone();
                        let content = node.content.unwrap_or_default();
                        if content.is_empty() {
                            return Err(corrupt(line_no, format!("textual node {key} has empty content")));
                        }
                        // Keep the sequence counter ahead of loaded keys so
                        // later chunks never collide.
                        if let Some(seq) = key.strip_prefix('t').and_then(|s| s.parse::<u64>().ok())
                        {
                            graph.text_seq = graph.text_seq.max(seq + 1);
                        }
                        graph.textual.insert(
                            key.clone(),
                            TextualNode {
                                key,
                                content,
                                entities: node.entities.unwrap_or_default(),
                                linked: BTreeSet::new(),
                            },
                        );
                    }
                    NodeKind::Concept => {
                        graph.concepts.insert(node.key);
                    }
                },
                Record::Edge(edge) => {
                    let src = NodeId { kind: edge.src_kind, key: edge.src_key };
                    match edge.src_kind {
                        NodeKind::Visual if !graph.visual.contains_key(&src.key) => {
                            return Err(corrupt(line_no, format!("edge from unknown visual node {}", src.key)));
                        }
                        NodeKind::Textual if !graph.textual.contains_key(&src.key) => {
                            return Err(corrupt(line_no, format!("edge from unknown textual node {}", src.key)));
                        }
                        NodeKind::Concept => {
                            return Err(corrupt(line_no, "edge with concept source".into()));
                        }
                        _ => {}
                    }
                    if !graph.concepts.contains(&edge.dst_key) {
                        return Err(corrupt(line_no, format!("edge to unknown concept {}", edge.dst_key)));
                    }
                    // Edges must agree with the concept sets recorded on
                    // their source node; together with per-node set
                    // disjointness this keeps orthogonality intact for any
                    // loadable file.
                    match (edge.src_kind, edge.edge_kind) {
                        (NodeKind::Visual, EdgeKind::Has) => {
                            let node = &graph.visual[&src.key];
                            if !node.positive_concepts.contains(&edge.dst_key) {
                                return Err(corrupt(
                                    line_no,
                                    format!(
                                        "HAS edge to {:?} not in positive set of {}",
                                        edge.dst_key, src.key
                                    ),
                                ));
                            }
                        }
                        (NodeKind::Visual, EdgeKind::NotHas) => {
                            let node = &graph.visual[&src.key];
                            if !node.negative_concepts.contains(&edge.dst_key) {
                                return Err(corrupt(
                                    line_no,
                                    format!(
                                        "NOT_HAS edge to {:?} not in negative set of {}",
                                        edge.dst_key, src.key
                                    ),
                                ));
                            }
                        }
                        (NodeKind::Textual, EdgeKind::Align) => {
                            let node = graph.textual.get_mut(&src.key).expect("checked above");
                            if !node.entities.contains(&edge.dst_key) {
                                return Err(corrupt(
                                    line_no,
                                    format!(
                                        "ALIGN edge to {:?} not among entities of {}",
                                        edge.dst_key, src.key
                                    ),
                                ));
                            }
                            node.linked.insert(edge.dst_key.clone());
                        }
                        (kind, edge_kind) => {
                            return Err(corrupt(
                                line_no,
                                format!("{edge_kind} edge cannot originate at a {kind} node"),
                            ));
                        }
                    }
                    graph.insert_edge(src, edge.dst_key, edge.edge_kind);
                }
            }
        }
        if !saw_header {
            return Err(corrupt(1, "missing header record".into()));
        }

        // Every concept a visual node asserts must have its edge in the
        // file; a truncation that drops whole edge lines shows up here.
        let mut has_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut not_has_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for edge in &graph.edges {
            match edge.kind {
                EdgeKind::Has => *has_counts.entry(edge.src.key.as_str()).or_default() += 1,
                EdgeKind::NotHas => {
                    *not_has_counts.entry(edge.src.key.as_str()).or_default() += 1
                }
                EdgeKind::Align => {}
            }
        }
        for node in graph.visual.values() {
            let has = has_counts.get(node.key.as_str()).copied().unwrap_or(0);
            let not_has = not_has_counts.get(node.key.as_str()).copied().unwrap_or(0);
            if has != node.positive_concepts.len() || not_has != node.negative_concepts.len() {
                let line = visual_lines.get(&node.key).copied().unwrap_or(0);
                return Err(corrupt(
                    line,
                    format!(
                        "visual node {} asserts {}+{} concepts but carries {}+{} logical edges",
                        node.key,
                        node.positive_concepts.len(),
                        node.negative_concepts.len(),
                        has,
                        not_has
                    ),
                ));
            }
        }
        Ok(graph)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    v: u32,
}

// Wire records keep keys alphabetized so serialized output is canonical.
#[derive(Serialize, Deserialize)]
struct NodeRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    content: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_ref: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entities: Option<BTreeSet<String>>,
    key: String,
    kind: NodeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative: Option<BTreeSet<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    positive: Option<BTreeSet<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_uri: Option<String>,
    t: NodeTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    uncertain: Option<BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    dst_key: String,
    edge_kind: EdgeKind,
    src_key: String,
    src_kind: NodeKind,
    t: EdgeTag,
}

#[derive(Serialize, Deserialize)]
enum NodeTag {
    #[serde(rename = "node")]
    Node,
}

#[derive(Serialize, Deserialize)]
enum EdgeTag {
    #[serde(rename = "edge")]
    Edge,
}

enum Record {
    Node(NodeRecord),
    Edge(EdgeRecord),
}

impl<'de> Deserialize<'de> for Record {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(deserializer)?;
        match value.get("t").and_then(|t| t.as_str()) {
            Some("node") => serde_json::from_value(value)
                .map(Record::Node)
                .map_err(serde::de::Error::custom),
            Some("edge") => serde_json::from_value(value)
                .map(Record::Edge)
                .map_err(serde::de::Error::custom),
            other => Err(serde::de::Error::custom(format!(
                "unknown record tag {other:?}"
            ))),
        }
    }
}

impl NodeRecord {
    fn from_visual(node: &VisualNode) -> Self {
        Self {
            content: None,
            embedding_ref: node.embedding_ref,
            entities: None,
            key: node.key.clone(),
            kind: NodeKind::Visual,
            negative: Some(node.negative_concepts.clone()),
            positive: Some(node.positive_concepts.clone()),
            source_uri: Some(node.source_uri.clone()),
            t: NodeTag::Node,
            uncertain: Some(node.uncertain_concepts.clone()),
        }
    }

    fn from_textual(node: &TextualNode) -> Self {
        Self {
            content: Some(node.content.clone()),
            embedding_ref: None,
            entities: Some(node.entities.clone()),
            key: node.key.clone(),
            kind: NodeKind::Textual,
            negative: None,
            positive: None,
            source_uri: None,
            t: NodeTag::Node,
            uncertain: None,
        }
    }

    fn concept(key: &str) -> Self {
        Self {
            content: None,
            embedding_ref: None,
            entities: None,
            key: key.to_string(),
            kind: NodeKind::Concept,
            negative: None,
            positive: None,
            source_uri: None,
            t: NodeTag::Node,
            uncertain: None,
        }
    }
}

impl EdgeRecord {
    fn from_edge(edge: &Edge) -> Self {
        Self {
            dst_key: edge.dst_key.clone(),
            edge_kind: edge.kind,
            src_key: edge.src.key.clone(),
            src_kind: edge.src.kind,
            t: EdgeTag::Edge,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn partition_of(pos: &[&str], neg: &[&str], unc: &[&str]) -> Partition {
        Partition {
            positive: pos.iter().map(|s| s.to_string()).collect(),
            negative: neg.iter().map(|s| s.to_string()).collect(),
            uncertain: unc.iter().map(|s| s.to_string()).collect(),
            tau_star: 0.5,
            delta: 0.0,
            kappa: 0.0,
        }
    }

    #[test]
    fn episode_creates_nodes_and_polarized_edges() {
        let mut graph = PolarGraph::new();
        let id = graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &["wolf"], &["husky"]), None)
            .unwrap();
        assert_eq!(id, NodeId::visual("img://1"));
        assert_eq!(graph.visual_count(), 1);
        assert_eq!(graph.concept_count(), 3);
        assert_eq!(graph.edge_count(), 2);

        let hood = graph.concept_neighborhood("dog");
        assert_eq!(hood.has_sources.len(), 1);
        assert!(hood.has_sources.contains(&id));
        assert!(graph.concept_neighborhood("wolf").not_has_sources.contains(&id));
        let husky = graph.concept_neighborhood("husky");
        assert!(!husky.has_logical_edge());
        assert!(husky.align_sources.is_empty());
    }

    #[test]
    fn uncovered_episode_has_no_edges_and_no_coverage() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("img://1", &partition_of(&[], &[], &["x"]), None)
            .unwrap();
        assert_eq!(graph.edge_count(), 0);
        let stats = graph.compute_stats();
        assert_eq!(stats.verifiable_coverage, 0.0);
    }

    #[test]
    fn duplicate_episode_rejected() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("img://1", &partition_of(&["a"], &[], &[]), None)
            .unwrap();
        assert!(matches!(
            graph.add_visual_episode("img://1", &partition_of(&["b"], &[], &[]), None),
            Err(GraphError::DuplicateEpisode(_))
        ));
    }

    #[test]
    fn alignment_links_only_logically_covered_concepts() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &[], &[]), None)
            .unwrap();
        let entities: BTreeSet<String> = ["dog", "unicorn"].iter().map(|s| s.to_string()).collect();
        let id = graph.add_text_chunk("dogs are loyal", &entities).unwrap();

        let node = graph.textual(&id.key).unwrap();
        assert_eq!(node.entities.len(), 2);
        assert_eq!(node.linked.iter().collect::<Vec<_>>(), vec!["dog"]);
        let align_edges = graph.edges().filter(|e| e.kind == EdgeKind::Align).count();
        assert_eq!(align_edges, 1);
    }

    #[test]
    fn empty_entities_yield_unlinked_chunk() {
        let mut graph = PolarGraph::new();
        let id = graph.add_text_chunk("plain text", &BTreeSet::new()).unwrap();
        assert!(graph.textual(&id.key).unwrap().linked.is_empty());
        assert_eq!(graph.edge_count(), 0);
    }

    #[test]
    fn two_chunks_naming_same_concept_get_distinct_edges() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &[], &[]), None)
            .unwrap();
        let entities: BTreeSet<String> = std::iter::once("dog".to_string()).collect();
        let a = graph.add_text_chunk("chunk one about dog", &entities).unwrap();
        let b = graph.add_text_chunk("chunk two about dog", &entities).unwrap();
        assert_ne!(a, b);
        let hood = graph.concept_neighborhood("dog");
        assert_eq!(hood.align_sources.len(), 2);
    }

    #[test]
    fn relink_adds_missing_alignment_after_later_episode() {
        let mut graph = PolarGraph::new();
        let entities: BTreeSet<String> = std::iter::once("dog".to_string()).collect();
        graph.add_text_chunk("early chunk", &entities).unwrap();
        graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &[], &[]), None)
            .unwrap();
        // Lazy linking: the chunk predates the episode, so no edge yet.
        assert_eq!(graph.concept_neighborhood("dog").align_sources.len(), 0);
        assert_eq!(graph.relink_text(), 1);
        assert_eq!(graph.concept_neighborhood("dog").align_sources.len(), 1);
        // Idempotent.
        assert_eq!(graph.relink_text(), 0);
    }

    #[test]
    fn unknown_concept_neighborhood_is_empty() {
        let graph = PolarGraph::new();
        let hood = graph.concept_neighborhood("nothing");
        assert!(hood.has_sources.is_empty());
        assert!(hood.not_has_sources.is_empty());
        assert!(hood.align_sources.is_empty());
    }

    #[test]
    fn mixed_node_appears_in_both_neighborhoods() {
        let mut graph = PolarGraph::new();
        let id = graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &["cat"], &[]), None)
            .unwrap();
        assert!(graph.concept_neighborhood("dog").has_sources.contains(&id));
        assert!(graph.concept_neighborhood("cat").not_has_sources.contains(&id));
    }

    #[test]
    fn coverage_counts_nodes_with_any_logical_edge() {
        let mut graph = PolarGraph::new();
        graph.add_visual_episode("a", &partition_of(&["x"], &[], &[]), None).unwrap();
        graph.add_visual_episode("b", &partition_of(&[], &["y"], &[]), None).unwrap();
        graph.add_visual_episode("c", &partition_of(&[], &[], &["z"]), None).unwrap();
        let stats = graph.compute_stats();
        assert!((stats.verifiable_coverage - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.total_not_has, 1);
    }

    // Synthetic reconstruction of the observed per-image edge maximum.
    #[test]
    fn max_edges_per_image_tracks_the_densest_node() {
        let mut graph = PolarGraph::new();
        let many: Vec<String> = (0..141).map(|i| format!("c{i:03}")).collect();
        let partition = Partition {
            positive: many.iter().cloned().collect(),
            negative: (0..108).map(|i| format!("n{i:03}")).collect(),
            uncertain: BTreeSet::new(),
            tau_star: 0.5,
            delta: 0.0,
            kappa: 0.0,
        };
        graph.add_visual_episode("dense", &partition, None).unwrap();
        graph.add_visual_episode("sparse", &partition_of(&["a"], &[], &[]), None).unwrap();
        let stats = graph.compute_stats();
        assert_eq!(stats.max_has_per_image, 141);
        assert_eq!(stats.max_not_has_per_image, 108);
        assert_eq!(stats.total_not_has, 108);
    }

    #[test]
    fn empty_graph_round_trips() {
        let graph = PolarGraph::new();
        let text = graph.save_to_string();
        let loaded = PolarGraph::load_from_str(&text).unwrap();
        assert_eq!(loaded.save_to_string(), text);
        assert_eq!(text, "{\"v\":1}\n");
    }

    #[test]
    fn populated_graph_round_trips_and_is_deterministic() {
        let build = || {
            let mut graph = PolarGraph::new();
            graph
                .add_visual_episode("img://1", &partition_of(&["dog"], &["wolf"], &["husky"]), Some(0))
                .unwrap();
            graph
                .add_visual_episode("img://2", &partition_of(&["cat"], &[], &[]), Some(3))
                .unwrap();
            let entities: BTreeSet<String> = std::iter::once("dog".to_string()).collect();
            graph.add_text_chunk("a chunk about dog", &entities).unwrap();
            graph
        };
        let first = build().save_to_string();
        let second = build().save_to_string();
        assert_eq!(first, second);

        let loaded = PolarGraph::load_from_str(&first).unwrap();
        assert_eq!(loaded.save_to_string(), first);
        assert_eq!(loaded.visual_count(), 2);
        assert_eq!(loaded.textual_count(), 1);
        assert_eq!(loaded.textual("t000000").unwrap().linked.len(), 1);
    }

    #[test]
    fn loaded_graph_continues_text_sequence() {
        let mut graph = PolarGraph::new();
        graph.add_text_chunk("one", &BTreeSet::new()).unwrap();
        graph.add_text_chunk("two", &BTreeSet::new()).unwrap();
        let mut loaded = PolarGraph::load_from_str(&graph.save_to_string()).unwrap();
        let id = loaded.add_text_chunk("three", &BTreeSet::new()).unwrap();
        assert_eq!(id.key, "t000002");
    }

    #[test]
    fn truncated_file_reports_line_number() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("img://1", &partition_of(&["dog"], &[], &[]), None)
            .unwrap();
        let text = graph.save_to_string();
        let cut = &text[..text.len() - 10];
        match PolarGraph::load_from_str(cut) {
            Err(GraphError::CorruptFile { line, .. }) => assert!(line > 1),
            other => panic!("expected CorruptFile, got {other:?}"),
        }
    }

    #[test]
    fn missing_header_is_corrupt() {
        assert!(matches!(
            PolarGraph::load_from_str(""),
            Err(GraphError::CorruptFile { line: 1, .. })
        ));
        let no_header = "{\"t\":\"node\",\"key\":\"x\",\"kind\":\"CONCEPT\"}\n";
        assert!(matches!(
            PolarGraph::load_from_str(no_header),
            Err(GraphError::CorruptFile { line: 1, .. })
        ));
    }

    #[test]
    fn dangling_edge_is_corrupt() {
        let text = "{\"v\":1}\n{\"dst_key\":\"dog\",\"edge_kind\":\"HAS\",\"src_key\":\"ghost\",\"src_kind\":\"VISUAL\",\"t\":\"edge\"}\n";
        match PolarGraph::load_from_str(text) {
            Err(GraphError::CorruptFile { line: 2, .. }) => {}
            other => panic!("expected CorruptFile at line 2, got {other:?}"),
        }
    }

    #[test]
    fn uncertain_overlap_rejected_at_ingestion() {
        let mut graph = PolarGraph::new();
        let partition = Partition {
            positive: std::iter::once("dog".to_string()).collect(),
            negative: BTreeSet::new(),
            uncertain: std::iter::once("dog".to_string()).collect(),
            tau_star: 0.5,
            delta: 0.1,
            kappa: 1.0,
        };
        assert!(matches!(
            graph.add_visual_episode("img://1", &partition, None),
            Err(GraphError::OverlappingPartition(_))
        ));
    }

    #[test]
    fn edge_disagreeing_with_node_sets_is_corrupt() {
        let text = concat!(
            "{\"v\":1}\n",
            "{\"key\":\"v1\",\"kind\":\"VISUAL\",\"negative\":[],\"positive\":[\"dog\"],\"source_uri\":\"v1\",\"t\":\"node\",\"uncertain\":[]}\n",
            "{\"key\":\"cat\",\"kind\":\"CONCEPT\",\"t\":\"node\"}\n",
            "{\"dst_key\":\"cat\",\"edge_kind\":\"HAS\",\"src_key\":\"v1\",\"src_kind\":\"VISUAL\",\"t\":\"edge\"}\n",
        );
        match PolarGraph::load_from_str(text) {
            Err(GraphError::CorruptFile { line: 4, .. }) => {}
            other => panic!("expected CorruptFile at line 4, got {other:?}"),
        }
    }

    #[test]
    fn node_with_missing_edge_is_corrupt() {
        let mut graph = PolarGraph::new();
        graph
            .add_visual_episode("v1", &partition_of(&["dog"], &["cat"], &[]), None)
            .unwrap();
        let text = graph.save_to_string();
        // Drop the NOT_HAS edge line but keep the node intact.
        let cut: String = text
            .lines()
            .filter(|line| !line.contains("NOT_HAS"))
            .map(|line| format!("{line}\n"))
            .collect();
        match PolarGraph::load_from_str(&cut) {
            Err(GraphError::CorruptFile { line: 2, .. }) => {}
            other => panic!("expected CorruptFile at the node line, got {other:?}"),
        }
    }

    #[test]
    fn node_record_with_overlapping_sets_is_corrupt() {
        let text = concat!(
            "{\"v\":1}\n",
            "{\"key\":\"v1\",\"kind\":\"VISUAL\",\"negative\":[\"dog\"],\"positive\":[\"dog\"],\"source_uri\":\"v1\",\"t\":\"node\",\"uncertain\":[]}\n",
        );
        match PolarGraph::load_from_str(text) {
            Err(GraphError::CorruptFile { line: 2, .. }) => {}
            other => panic!("expected CorruptFile at line 2, got {other:?}"),
        }
    }

    #[test]
    fn orthogonality_holds_across_public_api() {
        let mut graph = PolarGraph::new();
        graph.add_visual_episode("a", &partition_of(&["dog"], &["cat"], &[]), None).unwrap();
        graph.add_visual_episode("b", &partition_of(&["cat"], &["dog"], &[]), None).unwrap();
        // Conflicting evidence lives on different visual sources; no single
        // (visual, concept) pair may carry both edge kinds.
        for edge in graph.edges() {
            if edge.kind == EdgeKind::Has {
                assert!(!graph.edges.contains(&Edge {
                    src: edge.src.clone(),
                    dst_key: edge.dst_key.clone(),
                    kind: EdgeKind::NotHas,
                }));
            }
        }
        assert_eq!(graph.edge_count(), 4);
    }
}
