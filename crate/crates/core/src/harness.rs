//! Synthetic benchmark harness.
//!
//! Generates seeded worlds in which every gold query has a designated
//! adversarial distractor: a node that is *nearer in embedding space* than
//! the correct answer but carries a `NOT_HAS` edge on a wanted concept.
//! Four retrieval configurations run over the same world:
//!
//! - `VANILLA` — similarity threshold only, no logic.
//! - `POS_ONLY` — lexicographic protocol with `NOT_HAS` edges masked.
//! - `NEG_ONLY` — lexicographic protocol with `HAS` edges masked.
//! - `FULL` — the unmodified protocol.
//!
//! Accuracy is the rank-1 gold hit rate; F1 is the token overlap between
//! the assembled evidence and the evidence a perfect retriever would have
//! assembled (every genuinely relevant episode). Everything is a pure
//! function of the spec seed, so reports are reproducible bit-for-bit
//! (wall-clock timings aside).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{EpisodeRef, SyntheticWorld};
use crate::config::EngineConfig;
use crate::graph::{GraphStats, PolarGraph};
use crate::index::{SearchField, VectorIndex};
use crate::pipeline::{ensemble_for, ingest_visual_episode, ClientBundle, PipelineError};
use crate::retrieval::{
    evidence_items, retrieve, similarity_retrieve, QueryConstraints, RetrievalOptions,
};

const HARNESS_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid bench spec: {0}")]
    InvalidSpec(String),
    #[error("world construction failed: {0}")]
    WorldConstruction(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of one synthetic benchmark world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    pub num_episodes: usize,
    /// Inclusive range of ground-truth concepts per episode.
    pub concepts_per_episode: (usize, usize),
    /// Fraction of queries whose nearest-by-similarity memory violates a
    /// constraint.
    pub distractor_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Retrieval depth.
    pub k: usize,
    /// Similarity threshold of the vanilla baseline.
    pub gamma: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            num_episodes: 50,
            concepts_per_episode: (3, 6),
            distractor_rate: 0.5,
            noise_sigma: 0.05,
            seed: 0,
            k: 5,
            gamma: 0.0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |reason: &str| Err(HarnessError::InvalidSpec(reason.to_string()));
        if self.num_episodes < 2 {
            return fail("num_episodes must be >= 2");
        }
        if self.concepts_per_episode.0 < 1 || self.concepts_per_episode.0 > self.concepts_per_episode.1
        {
            return fail("concepts_per_episode must be a non-empty range starting at >= 1");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return fail("distractor_rate must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma must be >= 0");
        }
        if self.k < 1 {
            return fail("k must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationConfig {
    Vanilla,
    PosOnly,
    NegOnly,
    Full,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig::Vanilla,
        AblationConfig::PosOnly,
        AblationConfig::NegOnly,
        AblationConfig::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationConfig::Vanilla => "VANILLA",
            AblationConfig::PosOnly => "POS_ONLY",
            AblationConfig::NegOnly => "NEG_ONLY",
            AblationConfig::Full => "FULL",
        }
    }
}

/// The three ways a query's neighborhood is staged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryFamily {
    /// Distractor nearest; conflict through NOT_HAS on a wanted concept.
    AdversarialPlain,
    /// Distractor nearest and also entailed through a shared concept, so
    /// masking NOT_HAS edges lets it win.
    AdversarialSharedEntail,
    /// Distractor nearest, conflicting both ways: NOT_HAS on a wanted
    /// concept and HAS on an avoided one.
    AdversarialAvoidance,
    /// Gold nearest.
    Clean,
    /// A logically neutral node nearest.
    Confuser,
}

/// One evaluation query with its staged answer and adversary.
#[derive(Debug, Clone)]
pub struct GoldQuery {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub raw_query: String,
    pub query_vec: Vec<f32>,
    pub gold_key: String,
    pub distractor_key: String,
}

/// A generated world: the synthetic ground truth, the ingested graph and
/// index, and the gold query set.
pub struct World {
    pub synthetic: Arc<SyntheticWorld>,
    pub graph: PolarGraph,
    pub index: VectorIndex,
    pub queries: Vec<GoldQuery>,
    pub config: EngineConfig,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config: String,
    pub accuracy: f64,
    pub token_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: BenchSpec,
    pub configs: Vec<ConfigResult>,
    pub graph_stats: GraphStats,
    /// Wall-clock milliseconds per stage. Excluded from determinism
    /// comparisons.
    pub timings_ms: BTreeMap<String, f64>,
}

impl AblationReport {
    pub fn result(&self, config: AblationConfig) -> &ConfigResult {
        self.configs
            .iter()
            .find(|r| r.config == config.label())
            .expect("all four configs present")
    }
}

fn episode_id(i: usize) -> String {
    format!("ep_{i:04}")
}

fn episode_uri(i: usize) -> String {
    format!("synthetic://{}", episode_id(i))
}

/// Builds the world: plans ground truth, query families and distractors,
/// ingests every episode through the real pipeline, then constructs query
/// vectors against the realized embeddings so the staged similarity
/// orderings hold exactly.
pub fn generate_world(spec: &BenchSpec) -> Result<World, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0001);
    let n = spec.num_episodes;

    // Concept pools: one unique marker per episode plus a shared pool that
    // creates cross-episode overlap.
    let shared_pool: Vec<String> = (0..(n / 4).max(8)).map(|i| format!("obj{i:03}")).collect();
    let unique: Vec<String> = (0..n).map(|i| format!("uniq{i:04}")).collect();

    let mut truth: Vec<BTreeSet<String>> = Vec::with_capacity(n);
    for uniq in unique.iter() {
        let mut set = BTreeSet::new();
        set.insert(uniq.clone());
        let want = rng.random_range(spec.concepts_per_episode.0..=spec.concepts_per_episode.1);
        while set.len() < want.max(1) {
            set.insert(shared_pool[rng.random_range(0..shared_pool.len())].clone());
        }
        truth.push(set);
    }

    // Family assignment: exactly round(rate * n) adversarial queries,
    // spread uniformly by a seeded shuffle.
    let n_adversarial = (spec.distractor_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut families = vec![QueryFamily::Clean; n];
    let mut adversarial_seen = 0usize;
    let mut plain_seen = 0usize;
    for (position, &query) in order.iter().enumerate() {
        if position < n_adversarial {
            families[query] = match adversarial_seen % 3 {
                0 => QueryFamily::AdversarialPlain,
                1 => QueryFamily::AdversarialSharedEntail,
                _ => QueryFamily::AdversarialAvoidance,
            };
            adversarial_seen += 1;
        } else {
            families[query] = if plain_seen.is_multiple_of(2) || n < 3 {
                QueryFamily::Clean
            } else {
                QueryFamily::Confuser
            };
            plain_seen += 1;
        }
    }

    // Plan distractors and constraint lists; collect extra proposal
    // candidates (absent concepts an episode is interrogated about).
    //
    // Truth-set mutations happen in two passes: first the shared-entail
    // queries pin a concept common to gold and distractor, then the
    // avoidance concepts are created, each a fresh name inserted into
    // exactly one episode, so no later mutation can smuggle an avoided
    // concept into a gold episode.
    struct QueryPlan {
        positive: Vec<String>,
        negative: Vec<String>,
        distractor: usize,
        confuser: Option<usize>,
    }
    let mut extra_candidates: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    let mut plans: Vec<QueryPlan> = Vec::with_capacity(n);
    for i in 0..n {
        let distractor = pick_other(&mut rng, n, &[i]);
        // The distractor is asked about the gold unique concept, fails the
        // check, and earns the inhibitory edge.
        extra_candidates[distractor].insert(unique[i].clone());

        let mut positive = vec![unique[i].clone()];
        let mut confuser = None;
        match families[i] {
            QueryFamily::AdversarialSharedEntail => {
                let shared = truth[i]
                    .iter()
                    .find(|c| *c != &unique[i])
                    .cloned()
                    .unwrap_or_else(|| shared_pool[rng.random_range(0..shared_pool.len())].clone());
                truth[i].insert(shared.clone());
                truth[distractor].insert(shared.clone());
                positive.push(shared);
            }
            QueryFamily::Confuser => {
                confuser = Some(pick_other(&mut rng, n, &[i, distractor]));
            }
            _ => {}
        }
        plans.push(QueryPlan { positive, negative: Vec::new(), distractor, confuser });
    }
    for i in 0..n {
        if families[i] == QueryFamily::AdversarialAvoidance {
            let avoided = format!("avoid{i:04}");
            truth[plans[i].distractor].insert(avoided.clone());
            // The gold episode is asked about the avoided concept too, so
            // it ends up certifying the absence.
            extra_candidates[i].insert(avoided.clone());
            plans[i].negative.push(avoided);
        }
    }

    // Freeze the synthetic world and ingest through the real pipeline.
    let mut vocabulary: BTreeSet<String> = shared_pool.iter().cloned().collect();
    let mut synthetic = SyntheticWorld::new(spec.seed, spec.noise_sigma);
    for i in 0..n {
        vocabulary.extend(truth[i].iter().cloned());
        vocabulary.extend(extra_candidates[i].iter().cloned());
        synthetic.add_episode(episode_id(i), truth[i].iter().cloned());
        let candidates: Vec<String> =
            truth[i].union(&extra_candidates[i]).cloned().collect();
        synthetic.proposals.insert(episode_id(i), candidates);
    }
    synthetic.vocabulary = vocabulary.into_iter().collect();
    let synthetic = Arc::new(synthetic);

    let config = EngineConfig {
        seed: spec.seed,
        noise_sigma: spec.noise_sigma,
        k: spec.k,
        dim: HARNESS_DIM,
        ..Default::default()
    };
    let bundle = ClientBundle::synthetic(synthetic.clone(), config.dim);
    let ensemble = ensemble_for(&config).expect("built-in ensemble");
    let mut graph = PolarGraph::new();
    let mut index = VectorIndex::with_alpha(config.dim, config.alpha);
    for i in 0..n {
        let episode = EpisodeRef::with_uri(episode_id(i), episode_uri(i));
        ingest_visual_episode(&mut graph, &mut index, &bundle, &config, &ensemble, &episode, &[])?;
    }

    // Construct query vectors against the realized index.
    let mut queries = Vec::with_capacity(n);
    for (i, plan) in plans.into_iter().enumerate() {
        let QueryPlan { positive, negative, distractor, confuser } = plan;
        let gold_key = episode_uri(i);
        let distractor_key = episode_uri(distractor);
        let target = match families[i] {
            QueryFamily::Clean => None,
            QueryFamily::Confuser => confuser.map(episode_uri),
            _ => Some(distractor_key.clone()),
        };
        let query_vec = stage_query_vector(
            &index,
            &gold_key,
            target.as_deref(),
            matches!(
                families[i],
                QueryFamily::AdversarialPlain
                    | QueryFamily::AdversarialSharedEntail
                    | QueryFamily::AdversarialAvoidance
            ),
            &mut rng,
        )
        .map_err(HarnessError::WorldConstruction)?;
        let raw_query = if negative.is_empty() {
            format!("episode showing {}", positive.join(" and "))
        } else {
            format!(
                "episode showing {} without {}",
                positive.join(" and "),
                negative.join(" or ")
            )
        };
        queries.push(GoldQuery {
            positive,
            negative,
            raw_query,
            query_vec,
            gold_key,
            distractor_key,
        });
    }

    Ok(World { synthetic, graph, index, queries, config, gamma: spec.gamma })
}

fn pick_other(rng: &mut ChaCha8Rng, n: usize, excluded: &[usize]) -> usize {
    loop {
        let candidate = rng.random_range(0..n);
        if !excluded.contains(&candidate) {
            return candidate;
        }
    }
}

/// Fused-similarity proxy vector for one node.
fn fused_direction(index: &VectorIndex, key: &str) -> Vec<f64> {
    let embedding = index.embedding(key).expect("staged node is indexed");
    let alpha = index.alpha();
    embedding
        .z_vis
        .iter()
        .zip(&embedding.z_sem)
        .map(|(&v, &s)| alpha * v as f64 + (1.0 - alpha) * s as f64)
        .collect()
}

/// Builds a query vector with a verified similarity ordering.
///
/// With a target node: the target must be the fused-similarity top-1 and
/// (for adversarial queries) the gold node must beat every other node.
/// Without a target: gold must be top-1. The construction starts from a
/// mix of the target and gold fused directions and then deflates whichever
/// node violates the wanted ordering, re-checking against the actual index
/// each step, so staged orderings hold exactly rather than with high
/// probability.
fn stage_query_vector(
    index: &VectorIndex,
    gold_key: &str,
    target_key: Option<&str>,
    require_gold_second: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>, String> {
    let gold_dir = fused_direction(index, gold_key);
    let target_dir = target_key.map(|k| fused_direction(index, k));

    let unitize = |v: &[f64]| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    };
    let target_unit = target_dir.as_deref().map(unitize);

    let ladder: &[(f64, f64)] = &[(1.0, 0.6), (1.0, 0.75), (1.0, 0.5), (1.0, 0.85), (1.2, 0.7)];
    for &(a_target, a_gold) in ladder {
        let mut q: Vec<f64> = match &target_dir {
            Some(target) => target
                .iter()
                .zip(&gold_dir)
                .map(|(&t, &g)| a_target * t + a_gold * g)
                .collect(),
            None => gold_dir.clone(),
        };
        // Tiny seeded jitter decorrelates retries of the same rung across
        // queries that share geometry.
        for x in q.iter_mut() {
            *x += 1e-4 * (rng.random::<f64>() - 0.5);
        }

        for _ in 0..200 {
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                break;
            }
            let query: Vec<f32> = q.iter().map(|x| (x / norm) as f32).collect();
            let ranked = index
                .search(&query, index.len(), SearchField::Fused)
                .map_err(|e| e.to_string())?;

            // Identify the first node breaking the wanted ordering.
            let violator: Option<&str> = match target_key {
                Some(target) => {
                    if ranked[0].0 != target {
                        Some(ranked[0].0.as_str())
                    } else if require_gold_second && ranked.len() > 1 && ranked[1].0 != gold_key {
                        Some(ranked[1].0.as_str())
                    } else {
                        None
                    }
                }
                None => (ranked[0].0 != gold_key).then(|| ranked[0].0.as_str()),
            };
            let Some(violator) = violator else {
                return Ok(query);
            };

            if violator == gold_key {
                // Gold outranks the staged target: strengthen the target
                // component instead of deflating gold.
                let target = target_unit.as_ref().expect("gold violates only with a target");
                for (x, &t) in q.iter_mut().zip(target) {
                    *x = *x / norm + 0.25 * t;
                }
            } else {
                // Remove most of the violator's direction from the query.
                let v_unit = unitize(&fused_direction(index, violator));
                let projection: f64 =
                    q.iter().zip(&v_unit).map(|(&x, &v)| x * v).sum::<f64>() / norm;
                for (x, &v) in q.iter_mut().zip(&v_unit) {
                    *x = *x / norm - 0.75 * projection * v;
                }
            }
        }
    }
    Err(format!(
        "could not stage query ordering for gold={gold_key} target={target_key:?}"
    ))
}

fn query_constraints(query: &GoldQuery) -> QueryConstraints {
    QueryConstraints::from_parts(
        query.positive.iter().cloned(),
        query.negative.iter().cloned(),
        query.raw_query.clone(),
        query.query_vec.clone(),
    )
}

/// SQuAD-style token-overlap F1: lowercase, strip edge punctuation,
/// multiset counting.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    fn count(text: &str) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for raw in text.split_whitespace() {
            let token: String = raw
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if !token.is_empty() {
                *counts.entry(token).or_default() += 1;
            }
        }
        counts
    }
    let pred = count(prediction);
    let gold = count(reference);
    let pred_total: usize = pred.values().sum();
    let gold_total: usize = gold.values().sum();
    if pred_total == 0 || gold_total == 0 {
        return 0.0;
    }
    let overlap: usize = pred
        .iter()
        .map(|(token, &c)| c.min(gold.get(token.as_str()).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_total as f64;
    let recall = overlap as f64 / gold_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// The evidence a perfect retriever would assemble: the rendered contents
/// of every episode whose ground-truth concepts intersect the wanted set.
/// The gold node is always in it; semantic near-misses (relevant episodes
/// that happen to violate a constraint) are too, which is exactly the
/// recall the strict filter knowingly gives up.
fn gold_evidence_text(world: &World, query: &GoldQuery) -> String {
    let mut parts = Vec::new();
    for (episode_id, truth) in &world.synthetic.episodes {
        let uri = format!("synthetic://{episode_id}");
        let relevant =
            uri == query.gold_key || query.positive.iter().any(|c| truth.contains(c));
        if !relevant {
            continue;
        }
        if let Some(node) = world.graph.visual(&uri) {
            parts.push(format!(
                "image {}: {}",
                node.key,
                crate::index::serialize_state(
                    node.positive_concepts.iter(),
                    node.negative_concepts.iter()
                )
                .text
            ));
        }
    }
    parts.join(" ")
}

/// Runs one configuration over every gold query.
pub fn run_config(world: &World, config: AblationConfig) -> Result<ConfigResult, HarnessError> {
    let mut hits = 0usize;
    let mut f1_sum = 0.0f64;
    for query in &world.queries {
        let constraints = query_constraints(query);
        let results = match config {
            AblationConfig::Vanilla => similarity_retrieve(
                &query.query_vec,
                world.config.k,
                world.gamma,
                &world.graph,
                &world.index,
            ),
            _ => retrieve(
                &constraints,
                world.config.k,
                &world.graph,
                &world.index,
                RetrievalOptions {
                    strict: true,
                    use_has_edges: config != AblationConfig::NegOnly,
                    use_not_has_edges: config != AblationConfig::PosOnly,
                },
            ),
        }
        .map_err(PipelineError::from)?;

        if results.first().map(|t| t.node.key == query.gold_key).unwrap_or(false) {
            hits += 1;
        }
        let items = evidence_items(&results, &constraints, &world.graph);
        let assembled: Vec<String> = items.iter().map(|i| i.content.clone()).collect();
        f1_sum += token_f1(&assembled.join(" "), &gold_evidence_text(world, query));
    }
    let queries = world.queries.len().max(1) as f64;
    Ok(ConfigResult {
        config: config.label().to_string(),
        accuracy: hits as f64 / queries,
        token_f1: f1_sum / queries,
    })
}

/// Runs all four configurations on one world and collects the report.
pub fn run_ablation(spec: &BenchSpec) -> Result<AblationReport, HarnessError> {
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let world = generate_world(spec)?;
    timings.insert("generate_world".to_string(), ms_since(start));

    let mut configs = Vec::with_capacity(4);
    for config in AblationConfig::ALL {
        let start = Instant::now();
        configs.push(run_config(&world, config)?);
        timings.insert(config.label().to_lowercase(), ms_since(start));
    }
    Ok(AblationReport {
        spec: spec.clone(),
        configs,
        graph_stats: world.graph.compute_stats(),
        timings_ms: timings,
    })
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1_000.0
}

/// Writes the JSON report to `path` and an aligned plain-text table next to
/// it at `<path>.txt`.
pub fn write_report(report: &AblationReport, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json)?;

    let mut table_path = path.as_os_str().to_os_string();
    table_path.push(".txt");
    std::fs::write(table_path, render_table(report))?;
    Ok(())
}

pub fn render_table(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>9} {:>9}\n",
        "config", "accuracy", "token_f1"
    ));
    for row in &report.configs {
        out.push_str(&format!(
            "{:<10} {:>9.4} {:>9.4}\n",
            row.config, row.accuracy, row.token_f1
        ));
    }
    out.push_str(&format!(
        "\ncoverage {:.4}  max_has/image {}  max_not_has/image {}  total_not_has {}\n",
        report.graph_stats.verifiable_coverage,
        report.graph_stats.max_has_per_image,
        report.graph_stats.max_not_has_per_image,
        report.graph_stats.total_not_has
    ));
    out
}
