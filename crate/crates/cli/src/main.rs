//! Command-line interface for the polarized graph memory engine.
//!
//! Subcommands: `ingest` episodes/chunks into a graph, `build` the vector
//! store from a graph, `query` it, print `stats`, and `eval` the synthetic
//! ablation benchmark. Exit codes: 0 success, 2 config error, 3 backend
//! error, 4 corrupt store.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use polar_memory::clients::EpisodeRef;
use polar_memory::config::BackendKind;
use polar_memory::graph::{GraphError, PolarGraph};
use polar_memory::harness::{render_table, run_ablation, write_report, BenchSpec};
use polar_memory::index::{IndexError, Patch, VectorIndex};
use polar_memory::pipeline::{
    ensemble_for, ingest_text_chunk, ingest_visual_episode, run_query, ClientBundle, PipelineError,
};
use polar_memory::{ClientError, ConfigError, EngineConfig, SyntheticWorld};

#[derive(Parser)]
#[command(name = "polar-memory", version, about = "Polarized graph memory engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest visual episodes and text chunks from a JSON-Lines file.
    Ingest {
        /// Input JSONL: {"type":"visual","id":...,"uri":...,"present":[..],
        /// "candidates":[..],"patches":[[x1,y1,x2,y2],..]} or
        /// {"type":"text","content":...}.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the vector store from an existing graph.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Run one query against the memory.
    Query {
        /// Raw query text.
        query: String,
        #[command(flatten)]
        common: Common,
    },
    /// Print graph statistics.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Run the four-configuration ablation benchmark.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Key-value config file (backend settings, dim, kappa, alpha, k, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Graph store (JSON Lines).
    #[arg(long, default_value = "memory.graph.jsonl")]
    graph: PathBuf,
    /// Vector store (binary + sidecar manifest).
    #[arg(long, default_value = "memory.vectors.bin")]
    index: PathBuf,
    /// Output path (reports, query results); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep the strict conflict filter on (the default).
    #[arg(long, overrides_with = "no_strict")]
    strict: bool,
    /// Allow constraint-violating memories to backfill short results.
    #[arg(long)]
    no_strict: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Json,
    Table,
}

enum CliError {
    Config(String),
    Backend(String),
    Corrupt(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Corrupt(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Backend(m) | CliError::Corrupt(m) | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Client(inner) => CliError::Backend(inner.to_string()),
            PipelineError::Scoring(polar_memory::ScoringError::ScorerUnavailable(inner)) => {
                CliError::Backend(inner.to_string())
            }
            PipelineError::Graph(GraphError::CorruptFile { .. }) => CliError::Corrupt(e.to_string()),
            PipelineError::Index(IndexError::CorruptStore(_)) => CliError::Corrupt(e.to_string()),
            PipelineError::Retrieval(polar_memory::RetrievalError::Client(inner)) => {
                CliError::Backend(inner.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::CorruptFile { .. } => CliError::Corrupt(e.to_string()),
            GraphError::Io(inner) if inner.kind() == std::io::ErrorKind::NotFound => {
                CliError::Config(format!("graph store not found: {inner}"))
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::CorruptStore(_) => CliError::Corrupt(e.to_string()),
            IndexError::Io(inner) if inner.kind() == std::io::ErrorKind::NotFound => {
                CliError::Config(format!("vector store not found: {inner}"))
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { input, common } => ingest(&input, &common),
        Command::Build { common } => build(&common),
        Command::Query { query, common } => query_cmd(&query, &common),
        Command::Stats { common } => stats(&common),
        Command::Eval { common } => eval(&common),
    }
}

fn load_config(common: &Common) -> Result<EngineConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => EngineConfig::from_file(path)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Synthetic backends need the concept vocabulary of the existing graph so
/// the query parser and extractor can match against it, plus any ground
/// truth carried by the input file.
fn bundle_for(
    config: &EngineConfig,
    graph: &PolarGraph,
    episodes: &[(String, Vec<String>)],
    proposals: &[(String, Vec<String>)],
) -> ClientBundle {
    match config.backend {
        BackendKind::Http => ClientBundle::http(config.client.clone(), config.dim),
        BackendKind::Synthetic => {
            let mut world = SyntheticWorld::new(config.seed, config.noise_sigma);
            let mut vocabulary: std::collections::BTreeSet<String> =
                graph.concept_keys().cloned().collect();
            for (id, present) in episodes {
                vocabulary.extend(present.iter().cloned());
                world.add_episode(id.clone(), present.iter().cloned());
            }
            for (id, candidates) in proposals {
                vocabulary.extend(candidates.iter().cloned());
                world.proposals.insert(id.clone(), candidates.clone());
            }
            world.vocabulary = vocabulary.into_iter().collect();
            ClientBundle::synthetic(Arc::new(world), config.dim)
        }
    }
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Other(e.to_string())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

struct InputLine {
    kind: String,
    id: String,
    uri: Option<String>,
    present: Vec<String>,
    candidates: Option<Vec<String>>,
    patches: Vec<[u16; 4]>,
    content: String,
}

fn parse_input(path: &Path) -> Result<Vec<InputLine>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read input {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("input line {}: {e}", i + 1)))?;
        let strings = |key: &str| -> Vec<String> {
            value[key]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect()
                })
                .unwrap_or_default()
        };
        match value["type"].as_str().unwrap_or_default() {
            "visual" => {
                let id = value["id"].as_str().unwrap_or_default().to_string();
                if id.is_empty() {
                    return Err(CliError::Config(format!(
                        "input line {}: visual record needs an id",
                        i + 1
                    )));
                }
                let patches = value["patches"]
                    .as_array()
                    .map(|a| {
                        a.iter()
                            .filter_map(|p| {
                                let coords: Vec<u16> = p
                                    .as_array()?
                                    .iter()
                                    .filter_map(|v| v.as_u64().map(|x| x as u16))
                                    .collect();
                                (coords.len() == 4)
                                    .then(|| [coords[0], coords[1], coords[2], coords[3]])
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                lines.push(InputLine {
                    kind: "visual".into(),
                    id,
                    uri: value["uri"].as_str().map(str::to_string),
                    present: strings("present"),
                    candidates: value.get("candidates").map(|_| strings("candidates")),
                    patches,
                    content: String::new(),
                });
            }
            "text" => {
                let content = value["content"].as_str().unwrap_or_default().to_string();
                if content.is_empty() {
                    return Err(CliError::Config(format!(
                        "input line {}: text record needs content",
                        i + 1
                    )));
                }
                lines.push(InputLine {
                    kind: "text".into(),
                    id: String::new(),
                    uri: None,
                    present: Vec::new(),
                    candidates: None,
                    patches: Vec::new(),
                    content,
                });
            }
            other => {
                return Err(CliError::Config(format!(
                    "input line {}: unknown record type {other:?}",
                    i + 1
                )))
            }
        }
    }
    Ok(lines)
}

fn ingest(input: &Path, common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let lines = parse_input(input)?;

    let mut graph = if common.graph.exists() {
        PolarGraph::load(&common.graph)?
    } else {
        PolarGraph::new()
    };
    let mut index = if common.index.exists() {
        VectorIndex::load(&common.index, config.alpha)?
    } else {
        VectorIndex::with_alpha(config.dim, config.alpha)
    };

    let episodes: Vec<(String, Vec<String>)> = lines
        .iter()
        .filter(|l| l.kind == "visual")
        .map(|l| (l.id.clone(), l.present.clone()))
        .collect();
    let proposals: Vec<(String, Vec<String>)> = lines
        .iter()
        .filter(|l| l.kind == "visual")
        .filter_map(|l| l.candidates.clone().map(|c| (l.id.clone(), c)))
        .collect();
    let bundle = bundle_for(&config, &graph, &episodes, &proposals);
    let ensemble = ensemble_for(&config).map_err(|e| CliError::Config(e.to_string()))?;

    let mut visual = 0usize;
    let mut textual = 0usize;
    for line in &lines {
        if line.kind == "visual" {
            let episode = match &line.uri {
                Some(uri) => EpisodeRef::with_uri(line.id.clone(), uri.clone()),
                None => EpisodeRef::new(line.id.clone()),
            };
            let mut patches = Vec::new();
            for coords in &line.patches {
                let patch_ref = EpisodeRef::with_uri(
                    line.id.clone(),
                    format!(
                        "{}#{},{},{},{}",
                        episode.uri.as_deref().unwrap_or(&line.id),
                        coords[0],
                        coords[1],
                        coords[2],
                        coords[3]
                    ),
                );
                let vector = bundle.visual_encoder.encode_visual(&patch_ref)?;
                patches.push(Patch { vector, coords: *coords });
            }
            ingest_visual_episode(
                &mut graph,
                &mut index,
                &bundle,
                &config,
                &ensemble,
                &episode,
                &patches,
            )?;
            visual += 1;
        } else {
            ingest_text_chunk(&mut graph, &mut index, &bundle, &line.content)?;
            textual += 1;
        }
    }

    graph.save(&common.graph)?;
    index.save(&common.index)?;
    println!(
        "ingested {visual} visual episode(s), {textual} text chunk(s) -> {} nodes, {} edges",
        graph.visual_count() + graph.textual_count() + graph.concept_count(),
        graph.edge_count()
    );
    Ok(())
}

fn build(common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let mut graph = PolarGraph::load(&common.graph)?;
    let bundle = bundle_for(&config, &graph, &[], &[]);
    let mut index = VectorIndex::with_alpha(config.dim, config.alpha);

    let visual_keys: Vec<String> = graph.visual_nodes().map(|v| v.key.clone()).collect();
    for key in visual_keys {
        let (uri, positive, negative) = {
            let node = graph.visual(&key).expect("listed key exists");
            (
                node.source_uri.clone(),
                node.positive_concepts.clone(),
                node.negative_concepts.clone(),
            )
        };
        let episode = EpisodeRef::with_uri(key.clone(), uri);
        let visual_vec = bundle.visual_encoder.encode_visual(&episode)?;
        let embedding = polar_memory::index::build_embedding(
            &visual_vec,
            &[],
            &positive,
            &negative,
            bundle.text_encoder.as_ref(),
        )?;
        let row = index.insert(&key, embedding)?;
        graph.set_embedding_ref(&key, row);
    }
    let textual: Vec<(String, String)> = graph
        .textual_nodes()
        .map(|t| (t.key.clone(), t.content.clone()))
        .collect();
    for (key, content) in textual {
        let vector = bundle.text_encoder.encode_text(&content)?;
        index.insert_content(&key, &vector)?;
    }

    index.save(&common.index)?;
    graph.save(&common.graph)?;
    println!(
        "built vector store with {} entr(ies) at {}",
        index.len(),
        common.index.display()
    );
    Ok(())
}

fn query_cmd(raw: &str, common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let graph = PolarGraph::load(&common.graph)?;
    let index = VectorIndex::load(&common.index, config.alpha)?;
    let bundle = bundle_for(&config, &graph, &[], &[]);
    let strict = !common.no_strict;
    let outcome = run_query(&graph, &index, &bundle, &config, raw, strict)?;

    let text = match common.format {
        Format::Json => {
            let results: Vec<serde_json::Value> = outcome
                .results
                .iter()
                .zip(&outcome.evidence)
                .map(|(t, e)| {
                    serde_json::json!({
                        "rank": e.rank,
                        "node": {"kind": t.node.kind, "key": t.node.key},
                        "s_log": t.s_log,
                        "s_sem": t.s_sem,
                        "status": e.status.as_str(),
                    })
                })
                .collect();
            serde_json::to_string_pretty(&serde_json::json!({
                "query": raw,
                "positive": outcome.constraints.positive,
                "negative": outcome.constraints.negative,
                "results": results,
                "evidence": outcome.evidence.iter().map(|e| e.render()).collect::<Vec<_>>(),
                "segments": outcome.segments,
                "image_refs": outcome.image_refs,
            }))
            .expect("query outcome serializes")
        }
        Format::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "wanted: {:?}  avoided: {:?}\n",
                outcome.constraints.positive, outcome.constraints.negative
            ));
            out.push_str(&format!(
                "{:<4} {:<40} {:>5} {:>8}  status\n",
                "rank", "node", "s_log", "s_sem"
            ));
            for (t, e) in outcome.results.iter().zip(&outcome.evidence) {
                out.push_str(&format!(
                    "{:<4} {:<40} {:>5} {:>8.4}  {}\n",
                    e.rank,
                    format!("{}:{}", t.node.kind, t.node.key),
                    t.s_log,
                    t.s_sem,
                    e.status.as_str()
                ));
            }
            out.push_str("\nevidence:\n");
            for item in &outcome.evidence {
                out.push_str(&format!("  {}\n", item.render()));
            }
            out
        }
    };
    write_or_print(&common.out, &text)
}

fn stats(common: &Common) -> Result<(), CliError> {
    let graph = PolarGraph::load(&common.graph)?;
    let stats = graph.compute_stats();
    let text = match common.format {
        Format::Json => serde_json::to_string_pretty(&stats).expect("stats serialize"),
        Format::Table => format!(
            "visual nodes        {}\ntextual nodes       {}\nconcept nodes       {}\nedges               {}\nverifiable coverage {:.4}\nmax HAS / image     {}\nmax NOT_HAS / image {}\ntotal NOT_HAS       {}",
            graph.visual_count(),
            graph.textual_count(),
            graph.concept_count(),
            graph.edge_count(),
            stats.verifiable_coverage,
            stats.max_has_per_image,
            stats.max_not_has_per_image,
            stats.total_not_has
        ),
    };
    write_or_print(&common.out, &text)
}

fn eval(common: &Common) -> Result<(), CliError> {
    let config = load_config(common)?;
    let spec = BenchSpec {
        num_episodes: config.bench.episodes,
        concepts_per_episode: (config.bench.concepts_min, config.bench.concepts_max),
        distractor_rate: config.bench.distractor_rate,
        noise_sigma: config.noise_sigma,
        seed: config.seed,
        k: config.k,
        gamma: config.bench.gamma,
    };
    let report = run_ablation(&spec).map_err(|e| match e {
        polar_memory::harness::HarnessError::InvalidSpec(m) => CliError::Config(m),
        other => CliError::Other(other.to_string()),
    })?;
    // --out always yields both artifacts: the JSON report and the aligned
    // table at <out>.txt. --format only controls what goes to stdout.
    if let Some(path) = &common.out {
        write_report(&report, path).map_err(|e| CliError::Other(e.to_string()))?;
    }
    match common.format {
        Format::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Format::Table => println!("{}", render_table(&report)),
    }
    Ok(())
}
