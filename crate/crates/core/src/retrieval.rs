//! Lexicographical logic-aware retrieval and context assembly.
//!
//! Every memory node is scored with a pair `(s_log, s_sem)`: a discrete
//! logical state against the query constraints and a continuous semantic
//! similarity. Ranking is dictionary order on the pair, so a constraint
//! violation can never outrank a consistent memory no matter how similar it
//! looks, and verified evidence strictly supersedes neutral matches. There
//! is no fusion weight to tune: any strictly monotone rescaling of the
//! similarities leaves the ranking unchanged.
//!
//! Logical states: `-1` conflict (the node refutes a wanted concept or
//! exhibits an avoided one), `1` entailment (the node verifies a wanted
//! concept), `0` neutral. Conflict is checked first, so a node that both
//! entails and conflicts counts as a conflict.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::clients::{
    with_retries, ClientError, Generator, QueryConceptParser, TextEncoder, TokenCounter,
};
use crate::graph::{NodeId, NodeKind, PolarGraph};
use crate::index::{normalize, serialize_state, IndexError, SearchField, VectorIndex};
use crate::scoring::normalize_concept;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query parser returned malformed output after repair retry: {0}")]
    ParserMalformedOutput(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("graph holds no memory nodes")]
    EmptyGraph,
    #[error("retrieval depth k must be >= 1")]
    InvalidK,
    #[error("client error: {0}")]
    Client(#[from] ClientError),
    #[error("index error: {0}")]
    Index(#[from] IndexError),
}

/// Parsed query: wanted concepts, avoided concepts, and the encoded query
/// vector. The two lists are disjoint; a concept named on both sides stays
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryConstraints {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub raw_query: String,
    pub query_vec: Vec<f32>,
}

impl QueryConstraints {
    /// Builds constraints directly from concept lists, normalizing and
    /// resolving overlap the same way [`parse_query`] does.
    pub fn from_parts(
        positive: impl IntoIterator<Item = String>,
        negative: impl IntoIterator<Item = String>,
        raw_query: impl Into<String>,
        query_vec: Vec<f32>,
    ) -> Self {
        let positive = normalize_list(positive);
        let mut negative = normalize_list(negative);
        let positive_set: BTreeSet<&String> = positive.iter().collect();
        negative.retain(|c| !positive_set.contains(c));
        Self {
            positive,
            negative,
            raw_query: raw_query.into(),
            query_vec,
        }
    }
}

fn normalize_list(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in items {
        if let Ok(candidate) = normalize_concept(&item) {
            let key = candidate.into_string();
            if seen.insert(key.clone()) {
                out.push(key);
            }
        }
    }
    out
}

/// One scored memory node: logical state in `{-1, 0, 1}`, semantic
/// similarity in `[-1, 1]`, and the node id as the final tie-break.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTuple {
    pub s_log: i8,
    pub s_sem: f64,
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceStatus {
    VerifiedPresent,
    VerifiedAbsentConstraint,
    Unverified,
}

impl EvidenceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvidenceStatus::VerifiedPresent => "VERIFIED_PRESENT",
            EvidenceStatus::VerifiedAbsentConstraint => "VERIFIED_ABSENT_CONSTRAINT",
            EvidenceStatus::Unverified => "UNVERIFIED",
        }
    }
}

/// One retrieved memory rendered for the context window.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceItem {
    pub node: NodeId,
    pub status: EvidenceStatus,
    pub content: String,
    pub rank: usize,
}

impl EvidenceItem {
    /// The standardized evidence line. Bit-exact template:
    /// `[Fact Check: {Status}] {Content}`.
    pub fn render(&self) -> String {
        format!("[Fact Check: {}] {}", self.status.as_str(), self.content)
    }
}

/// Knobs for [`retrieve`]: the strict filter drops conflicts entirely
/// (default on); the edge masks support the ablation configurations.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalOptions {
    pub strict: bool,
    pub use_has_edges: bool,
    pub use_not_has_edges: bool,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            strict: true,
            use_has_edges: true,
            use_not_has_edges: true,
        }
    }
}

/// Parses a raw query into constraints via the parser client (one repair
/// retry on malformed output) and encodes the query text.
pub fn parse_query(
    raw: &str,
    parser: &dyn QueryConceptParser,
    encoder: &dyn TextEncoder,
) -> Result<QueryConstraints, RetrievalError> {
    if raw.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let mut lists = None;
    let mut last_reply = String::new();
    for repair in [false, true] {
        let reply = parser.parse_query_reply(raw, repair)?;
        last_reply = reply.clone();
        if let Some(parsed) = parse_constraint_reply(&reply) {
            lists = Some(parsed);
            break;
        }
    }
    let (positive, negative) =
        lists.ok_or(RetrievalError::ParserMalformedOutput(last_reply))?;

    let raw_vec = encoder.encode_text(raw)?;
    let query_vec = normalize(&raw_vec)?;
    Ok(QueryConstraints::from_parts(positive, negative, raw, query_vec))
}

fn parse_constraint_reply(reply: &str) -> Option<(Vec<String>, Vec<String>)> {
    // Tolerate prose around the JSON object by scanning for the outermost
    // braces.
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let value: serde_json::Value = serde_json::from_str(&reply[start..=end]).ok()?;
    let list = |key: &str| -> Option<Vec<String>> {
        value.get(key)?.as_array().map(|items| {
            items
                .iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
    };
    Some((list("positive")?, list("negative")?))
}

/// Concept sets a node asserts, as seen through the edge masks. For visual
/// nodes these are the HAS / NOT_HAS targets. A textual node asserts
/// mention, not presence: its ALIGN-linked concepts act as its positive set
/// and its negative set is empty.
fn node_concepts<'a>(
    node: &NodeId,
    graph: &'a PolarGraph,
    options: RetrievalOptions,
) -> (Option<&'a BTreeSet<String>>, Option<&'a BTreeSet<String>>) {
    match node.kind {
        NodeKind::Visual => match graph.visual(&node.key) {
            Some(v) => (
                options.use_has_edges.then_some(&v.positive_concepts),
                options.use_not_has_edges.then_some(&v.negative_concepts),
            ),
            None => (None, None),
        },
        NodeKind::Textual => match graph.textual(&node.key) {
            Some(t) => (options.use_has_edges.then_some(&t.linked), None),
            None => (None, None),
        },
        NodeKind::Concept => (None, None),
    }
}

fn intersects(wanted: &[String], have: Option<&BTreeSet<String>>) -> bool {
    have.map(|set| wanted.iter().any(|c| set.contains(c)))
        .unwrap_or(false)
}

/// Logical state of one node against the constraints: conflict wins over
/// entailment, entailment over neutral.
pub fn logic_state(node: &NodeId, constraints: &QueryConstraints, graph: &PolarGraph) -> i8 {
    logic_state_masked(node, constraints, graph, RetrievalOptions::default())
}

pub fn logic_state_masked(
    node: &NodeId,
    constraints: &QueryConstraints,
    graph: &PolarGraph,
    options: RetrievalOptions,
) -> i8 {
    let (has, not_has) = node_concepts(node, graph, options);
    if intersects(&constraints.positive, not_has) || intersects(&constraints.negative, has) {
        -1
    } else if intersects(&constraints.positive, has) {
        1
    } else {
        0
    }
}

/// Sorts scored tuples under descending lexicographic order on
/// `(s_log, s_sem)` with ascending node id as the tie-break, and takes the
/// top k. With the strict filter on, conflicts are dropped before the cut;
/// off, they can only fill seats left over by non-conflicting nodes.
pub fn rank_tuples(mut tuples: Vec<RankTuple>, k: usize, strict: bool) -> Vec<RankTuple> {
    if strict {
        tuples.retain(|t| t.s_log >= 0);
    }
    tuples.sort_by(|a, b| {
        b.s_log
            .cmp(&a.s_log)
            .then_with(|| b.s_sem.total_cmp(&a.s_sem))
            .then_with(|| a.node.cmp(&b.node))
    });
    tuples.truncate(k);
    tuples
}

/// Scores every memory node and returns the top k under the lexicographic
/// protocol. Nodes absent from the index score zero similarity.
pub fn retrieve(
    constraints: &QueryConstraints,
    k: usize,
    graph: &PolarGraph,
    index: &VectorIndex,
    options: RetrievalOptions,
) -> Result<Vec<RankTuple>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let nodes = graph.memory_node_ids();
    if nodes.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let tuples = nodes
        .into_iter()
        .map(|node| {
            let s_sem = index
                .similarity(&node.key, &constraints.query_vec, SearchField::Fused)
                .unwrap_or(0.0);
            let s_log = logic_state_masked(&node, constraints, graph, options);
            RankTuple { s_log, s_sem, node }
        })
        .collect();
    Ok(rank_tuples(tuples, k, options.strict))
}

/// Similarity-threshold baseline: rank by `s_sem` alone and keep nodes with
/// similarity at least `gamma`. No logical filtering at all.
pub fn similarity_retrieve(
    query_vec: &[f32],
    k: usize,
    gamma: f64,
    graph: &PolarGraph,
    index: &VectorIndex,
) -> Result<Vec<RankTuple>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let nodes = graph.memory_node_ids();
    if nodes.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let mut tuples: Vec<RankTuple> = nodes
        .into_iter()
        .filter_map(|node| {
            let s_sem = index
                .similarity(&node.key, query_vec, SearchField::Fused)
                .unwrap_or(0.0);
            (s_sem >= gamma).then_some(RankTuple { s_log: 0, s_sem, node })
        })
        .collect();
    tuples.sort_by(|a, b| b.s_sem.total_cmp(&a.s_sem).then_with(|| a.node.cmp(&b.node)));
    tuples.truncate(k);
    Ok(tuples)
}

/// Builds evidence items for ranked results, in rank order (rank 1 first).
pub fn evidence_items(
    results: &[RankTuple],
    constraints: &QueryConstraints,
    graph: &PolarGraph,
) -> Vec<EvidenceItem> {
    results
        .iter()
        .enumerate()
        .map(|(i, tuple)| {
            let (content, negative) = match tuple.node.kind {
                NodeKind::Textual => (
                    graph
                        .textual(&tuple.node.key)
                        .map(|t| t.content.clone())
                        .unwrap_or_default(),
                    None,
                ),
                _ => match graph.visual(&tuple.node.key) {
                    Some(v) => (
                        format!(
                            "image {}: {}",
                            v.key,
                            serialize_state(v.positive_concepts.iter(), v.negative_concepts.iter())
                                .text
                        ),
                        Some(&v.negative_concepts),
                    ),
                    None => (String::new(), None),
                },
            };
            let certifies_avoidance = negative
                .map(|neg| constraints.negative.iter().any(|c| neg.contains(c)))
                .unwrap_or(false);
            let status = if tuple.s_log == 1 {
                EvidenceStatus::VerifiedPresent
            } else if tuple.s_log == 0 && certifies_avoidance {
                EvidenceStatus::VerifiedAbsentConstraint
            } else {
                EvidenceStatus::Unverified
            };
            EvidenceItem { node: tuple.node.clone(), status, content, rank: i + 1 }
        })
        .collect()
}

/// Assembles the generator context: system instruction first, evidence in
/// between, raw query last. Evidence is placed in descending rank number so
/// the rank-1 item sits adjacent to the query; each item's content is
/// truncated to the per-item token cap (with a `…` marker when cut) before
/// the template is applied.
pub fn assemble_context(
    results: &[RankTuple],
    system_instruction: &str,
    raw_query: &str,
    constraints: &QueryConstraints,
    graph: &PolarGraph,
    per_item_token_cap: usize,
    tokenizer: &dyn TokenCounter,
) -> Vec<String> {
    let mut segments = Vec::with_capacity(results.len() + 2);
    segments.push(system_instruction.to_string());
    let items = evidence_items(results, constraints, graph);
    for item in items.iter().rev() {
        let content = if tokenizer.count(&item.content) > per_item_token_cap {
            let mut cut = tokenizer.truncate(&item.content, per_item_token_cap);
            cut.push('…');
            cut
        } else {
            item.content.clone()
        };
        let capped = EvidenceItem { content, ..item.clone() };
        segments.push(capped.render());
    }
    segments.push(raw_query.to_string());
    segments
}

/// Asks the generator to pick the best candidate by 0-based index. Replies
/// that do not parse to an in-range integer default to index 0.
pub fn rerank_candidates(
    question: &str,
    candidates: &[String],
    generator: &dyn Generator,
    max_retries: u32,
) -> usize {
    if candidates.len() <= 1 {
        return 0;
    }
    let mut prompt = String::from(
        "You are a strict evaluator. Select the single best answer that directly and correctly \
         answers the question.\nReturn ONLY the index number (0-based) as a single integer.\n\n",
    );
    prompt.push_str(&format!("Question: {question}\n\nCandidates:\n"));
    for (i, candidate) in candidates.iter().enumerate() {
        prompt.push_str(&format!("{i}: {candidate}\n"));
    }
    let reply = with_retries(max_retries, |_| generator.generate(&[prompt.clone()], &[]));
    match reply {
        Ok(text) => text
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&i| i < candidates.len())
            .unwrap_or(0),
        Err(_) => 0,
    }
}
