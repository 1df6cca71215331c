//! Acceptance suite. One test per criterion; each prints a single
//! PASS/FAIL line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Every check runs hermetically against synthetic clients; no network.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polar_memory::clients::{extract_entities, EntityExtractor, EpisodeRef, SyntheticWorld};
use polar_memory::graph::{NodeId, PolarGraph};
use polar_memory::harness::{generate_world, run_config, AblationConfig, BenchSpec};
use polar_memory::index::{
    manifest_path, normalize, serialize_state, HybridEmbedding, Patch, SearchField, VectorIndex,
};
use polar_memory::partition::{inject_anchors, otsu_threshold, partition_spectrum, Partition};
use polar_memory::retrieval::{
    evidence_items, rank_tuples, retrieve, EvidenceStatus, QueryConstraints, RankTuple,
    RetrievalOptions,
};
use polar_memory::scoring::ConfidenceSpectrum;

fn check(name: &str, run: impl FnOnce()) {
    let result = catch_unwind(AssertUnwindSafe(run));
    match result {
        Ok(()) => println!("acceptance: {name}: PASS"),
        Err(payload) => {
            println!("acceptance: {name}: FAIL");
            std::panic::resume_unwind(payload);
        }
    }
}

/// Independent threshold oracle: every midpoint between consecutive
/// distinct sorted values, objective evaluated by full rescans.
fn brute_force_otsu(scores: &[f64]) -> (f64, f64) {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    assert!(distinct.len() >= 2);
    let mut best_tau = f64::NAN;
    let mut best_obj = f64::NEG_INFINITY;
    for pair in distinct.windows(2) {
        let tau = (pair[0] + pair[1]) / 2.0;
        let rej: Vec<f64> = scores.iter().copied().filter(|&s| s <= tau).collect();
        let val: Vec<f64> = scores.iter().copied().filter(|&s| s > tau).collect();
        let omega_rej = rej.len() as f64 / scores.len() as f64;
        let omega_val = val.len() as f64 / scores.len() as f64;
        let mu_rej = rej.iter().sum::<f64>() / rej.len() as f64;
        let mu_val = val.iter().sum::<f64>() / val.len() as f64;
        let obj = omega_val * omega_rej * (mu_val - mu_rej) * (mu_val - mu_rej);
        if obj > best_obj {
            best_obj = obj;
            best_tau = tau;
        }
    }
    (best_tau, best_obj)
}

fn objective_at(scores: &[f64], tau: f64) -> f64 {
    let rej: Vec<f64> = scores.iter().copied().filter(|&s| s <= tau).collect();
    let val: Vec<f64> = scores.iter().copied().filter(|&s| s > tau).collect();
    if rej.is_empty() || val.is_empty() {
        return f64::NEG_INFINITY;
    }
    let omega_rej = rej.len() as f64 / scores.len() as f64;
    let omega_val = val.len() as f64 / scores.len() as f64;
    let mu_rej = rej.iter().sum::<f64>() / rej.len() as f64;
    let mu_val = val.iter().sum::<f64>() / val.len() as f64;
    omega_val * omega_rej * (mu_val - mu_rej) * (mu_val - mu_rej)
}

#[test]
fn otsu_oracle_equivalence() {
    check("otsu-oracle-equivalence", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);
        for _ in 0..1_000 {
            let size = rng.random_range(1..=50);
            let scores: Vec<f64> = (0..size).map(|_| rng.random_range(0.0..=1.0)).collect();
            let anchored = inject_anchors(&scores).unwrap();
            let result = otsu_threshold(&anchored).unwrap();
            let (_, oracle_obj) = brute_force_otsu(&anchored);
            let impl_obj = objective_at(&anchored, result.tau_star);
            assert!(
                (impl_obj - oracle_obj).abs() <= 1e-9,
                "objective mismatch: impl {impl_obj} vs oracle {oracle_obj}"
            );
        }
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5 s");
    });
}

#[test]
fn anchor_guarantee() {
    check("anchor-guarantee", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE98);
        for trial in 0..10_000u32 {
            let scores: Vec<f64> = if trial % 100 == 0 {
                Vec::new()
            } else if trial % 50 == 0 {
                let value = rng.random_range(0.0..=1.0);
                vec![value; rng.random_range(1..20)]
            } else {
                let size = rng.random_range(1..=50);
                (0..size).map(|_| rng.random_range(0.0..=1.0)).collect()
            };
            let anchored = inject_anchors(&scores).unwrap();
            let result = otsu_threshold(&anchored).unwrap();
            assert!(
                result.tau_star > 0.0 && result.tau_star < 1.0,
                "tau {} escaped (0, 1) on trial {trial}",
                result.tau_star
            );
        }
    });
}

#[test]
fn partition_completeness_and_margin_monotonicity() {
    check("partition-completeness-margin-monotonicity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE99);
        for _ in 0..300 {
            let size = rng.random_range(1..=40);
            let spectrum = ConfidenceSpectrum {
                episode_id: "ep".into(),
                scores: (0..size)
                    .map(|i| (format!("c{i:02}"), rng.random_range(0.0..=1.0)))
                    .collect(),
                template_count: 1,
            };
            let mut previous: Option<Partition> = None;
            for step in 0..10 {
                let kappa = step as f64 * 0.25;
                let partition = partition_spectrum(&spectrum, kappa).unwrap();
                assert_eq!(partition.len(), spectrum.scores.len(), "not a partition");
                assert!(partition.positive.is_disjoint(&partition.negative));
                assert!(partition.positive.is_disjoint(&partition.uncertain));
                assert!(partition.negative.is_disjoint(&partition.uncertain));
                let union: BTreeSet<&String> = partition
                    .positive
                    .iter()
                    .chain(&partition.negative)
                    .chain(&partition.uncertain)
                    .collect();
                assert_eq!(union.len(), spectrum.scores.len());
                if let Some(prev) = &previous {
                    assert!(
                        partition.uncertain.is_superset(&prev.uncertain),
                        "uncertain shrank as kappa grew"
                    );
                    assert!(partition.positive.is_subset(&prev.positive));
                    assert!(partition.negative.is_subset(&prev.negative));
                }
                previous = Some(partition);
            }
        }
    });
}

struct RandomCase {
    graph: PolarGraph,
    index: VectorIndex,
    concepts: Vec<String>,
}

fn random_case(rng: &mut ChaCha8Rng) -> RandomCase {
    let dim = 8;
    let concepts: Vec<String> = (0..6).map(|i| format!("concept{i}")).collect();
    let mut graph = PolarGraph::new();
    let mut index = VectorIndex::new(dim);
    let nodes = rng.random_range(3..25);
    for i in 0..nodes {
        let positive: BTreeSet<String> = concepts
            .iter()
            .filter(|_| rng.random_bool(0.35))
            .cloned()
            .collect();
        let negative: BTreeSet<String> = concepts
            .iter()
            .filter(|c| !positive.contains(*c) && rng.random_bool(0.25))
            .cloned()
            .collect();
        let partition = Partition {
            positive,
            negative,
            uncertain: BTreeSet::new(),
            tau_star: 0.5,
            delta: 0.0,
            kappa: 0.0,
        };
        let key = format!("node{i:03}");
        graph.add_visual_episode(&key, &partition, None).unwrap();
        if rng.random_bool(0.9) {
            let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.insert_content(&key, &raw).unwrap();
        }
        if rng.random_bool(0.3) {
            let entities: BTreeSet<String> = concepts
                .iter()
                .filter(|_| rng.random_bool(0.3))
                .cloned()
                .collect();
            let chunk = graph
                .add_text_chunk(&format!("chunk {i} mentioning things"), &entities)
                .unwrap();
            let raw: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.insert_content(&chunk.key, &raw).unwrap();
        }
    }
    RandomCase { graph, index, concepts }
}

fn random_constraints(rng: &mut ChaCha8Rng, case: &RandomCase) -> QueryConstraints {
    let positive: Vec<String> = case
        .concepts
        .iter()
        .filter(|_| rng.random_bool(0.4))
        .cloned()
        .collect();
    let negative: Vec<String> = case
        .concepts
        .iter()
        .filter(|c| !positive.contains(*c) && rng.random_bool(0.3))
        .cloned()
        .collect();
    let raw: Vec<f32> = (0..case.index.dimension())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    QueryConstraints::from_parts(positive, negative, "q", normalize(&raw).unwrap())
}

/// Independent oracle for the ranking: plain set logic over node concept
/// sets, full lexicographic sort, no shared code with `retrieve` beyond the
/// similarity lookup it is specified against.
fn oracle_rank(
    case: &RandomCase,
    constraints: &QueryConstraints,
    k: usize,
    strict: bool,
) -> Vec<RankTuple> {
    let mut tuples: Vec<RankTuple> = Vec::new();
    for node in case.graph.visual_nodes() {
        let conflict = constraints.positive.iter().any(|c| node.negative_concepts.contains(c))
            || constraints.negative.iter().any(|c| node.positive_concepts.contains(c));
        let entail = constraints.positive.iter().any(|c| node.positive_concepts.contains(c));
        let s_log = if conflict {
            -1
        } else if entail {
            1
        } else {
            0
        };
        let s_sem = case
            .index
            .similarity(&node.key, &constraints.query_vec, SearchField::Fused)
            .unwrap_or(0.0);
        tuples.push(RankTuple { s_log, s_sem, node: NodeId::visual(node.key.clone()) });
    }
    for node in case.graph.textual_nodes() {
        let conflict = constraints.negative.iter().any(|c| node.linked.contains(c));
        let entail = constraints.positive.iter().any(|c| node.linked.contains(c));
        let s_log = if conflict {
            -1
        } else if entail {
            1
        } else {
            0
        };
        let s_sem = case
            .index
            .similarity(&node.key, &constraints.query_vec, SearchField::Fused)
            .unwrap_or(0.0);
        tuples.push(RankTuple { s_log, s_sem, node: NodeId::textual(node.key.clone()) });
    }
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

#[test]
fn lexicographic_dominance() {
    check("lexicographic-dominance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE9A);
        let mut trials = 0usize;
        while trials < 10_000 {
            let case = random_case(&mut rng);
            for _ in 0..10 {
                trials += 1;
                let constraints = random_constraints(&mut rng, &case);
                let k = rng.random_range(1..10);
                let strict = rng.random_bool(0.7);
                let options = RetrievalOptions { strict, ..Default::default() };
                let got = retrieve(&constraints, k, &case.graph, &case.index, options).unwrap();

                // No lower logical state may precede a higher one.
                for pair in got.windows(2) {
                    assert!(
                        pair[0].s_log >= pair[1].s_log,
                        "dominance violated: {:?} before {:?}",
                        pair[0],
                        pair[1]
                    );
                }
                if strict {
                    assert!(got.iter().all(|t| t.s_log >= 0), "strict filter leaked a conflict");
                }
                let expected = oracle_rank(&case, &constraints, k, strict);
                assert_eq!(got, expected, "retrieve deviates from full-sort oracle");
            }
        }
    });
}

#[test]
fn monotone_transform_invariance() {
    check("monotone-transform-invariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE9B);
        for _ in 0..1_000 {
            let n = rng.random_range(2..40);
            let tuples: Vec<RankTuple> = (0..n)
                .map(|i| RankTuple {
                    s_log: [-1, 0, 1][rng.random_range(0..3)],
                    s_sem: rng.random_range(-1.0..1.0),
                    node: NodeId::visual(format!("n{i:02}")),
                })
                .collect();
            let k = rng.random_range(1..12);
            let strict = rng.random_bool(0.5);

            let cubed: Vec<RankTuple> = tuples
                .iter()
                .map(|t| RankTuple {
                    s_log: t.s_log,
                    s_sem: t.s_sem.powi(3),
                    node: t.node.clone(),
                })
                .collect();

            let base: Vec<NodeId> = rank_tuples(tuples, k, strict)
                .into_iter()
                .map(|t| t.node)
                .collect();
            let transformed: Vec<NodeId> = rank_tuples(cubed, k, strict)
                .into_iter()
                .map(|t| t.node)
                .collect();
            assert_eq!(base, transformed, "cubing similarities changed the ranking");
        }
    });
}

#[test]
fn ablation_ordering() {
    check("ablation-ordering", || {
        let started = Instant::now();
        let seeds = 20u64;
        let mut sums = std::collections::BTreeMap::new();
        for seed in 0..seeds {
            let spec = BenchSpec {
                num_episodes: 200,
                concepts_per_episode: (3, 6),
                distractor_rate: 0.5,
                noise_sigma: 0.1,
                seed,
                k: 5,
                gamma: 0.0,
            };
            let world = generate_world(&spec).unwrap();
            for config in AblationConfig::ALL {
                let result = run_config(&world, config).unwrap();
                *sums.entry(config.label()).or_insert(0.0) += result.accuracy;
            }
        }
        let mean = |label: &str| sums[label] / seeds as f64;
        let (vanilla, pos_only, neg_only, full) = (
            mean("VANILLA"),
            mean("POS_ONLY"),
            mean("NEG_ONLY"),
            mean("FULL"),
        );
        println!(
            "  mean accuracies over {seeds} seeds: vanilla {vanilla:.4}, pos_only {pos_only:.4}, neg_only {neg_only:.4}, full {full:.4}"
        );
        assert!(full >= neg_only, "FULL {full} < NEG_ONLY {neg_only}");
        assert!(neg_only >= vanilla, "NEG_ONLY {neg_only} < VANILLA {vanilla}");
        assert!(full >= pos_only, "FULL {full} < POS_ONLY {pos_only}");
        assert!(
            full - vanilla >= 0.10,
            "FULL - VANILLA = {} < 0.10",
            full - vanilla
        );
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    });
}

#[test]
fn extreme_distractor_limits() {
    check("extreme-distractor-limits", || {
        for seed in [0u64, 17, 4242] {
            let spec = BenchSpec {
                num_episodes: 100,
                concepts_per_episode: (3, 6),
                distractor_rate: 1.0,
                noise_sigma: 0.0,
                seed,
                k: 5,
                gamma: 0.0,
            };
            let world = generate_world(&spec).unwrap();
            let full = run_config(&world, AblationConfig::Full).unwrap();
            let vanilla = run_config(&world, AblationConfig::Vanilla).unwrap();
            assert_eq!(full.accuracy, 1.0, "seed {seed}: FULL not exactly 1.0");
            assert_eq!(vanilla.accuracy, 0.0, "seed {seed}: VANILLA not exactly 0.0");
        }
    });
}

#[test]
fn persistence_round_trip() {
    check("persistence-round-trip", || {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE9C);

        for trial in 0..100 {
            let case = random_case(&mut rng);
            let path = dir.path().join(format!("graph{trial}.jsonl"));
            case.graph.save(&path).unwrap();
            let loaded = PolarGraph::load(&path).unwrap();
            assert_eq!(
                loaded.save_to_string(),
                case.graph.save_to_string(),
                "graph round-trip lost structure on trial {trial}"
            );
        }

        // Vector store: bit-exact round trip including patches.
        let dim = 16;
        let mut index = VectorIndex::new(dim);
        for i in 0..50 {
            let vis: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sem: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let patches = if i % 4 == 0 {
                vec![Patch {
                    vector: normalize(&vis).unwrap(),
                    coords: [0, 0, rng.random_range(1..=1000), rng.random_range(1..=1000)],
                }]
            } else {
                Vec::new()
            };
            index
                .insert(
                    &format!("v{i:03}"),
                    HybridEmbedding {
                        z_vis: normalize(&vis).unwrap(),
                        z_loc: patches,
                        z_sem: normalize(&sem).unwrap(),
                    },
                )
                .unwrap();
        }
        let first = dir.path().join("vectors.bin");
        let second = dir.path().join("vectors2.bin");
        index.save(&first).unwrap();
        let loaded = VectorIndex::load(&first, index.alpha()).unwrap();
        loaded.save(&second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
            "vector file not bit-exact"
        );
        assert_eq!(
            std::fs::read(manifest_path(&first)).unwrap(),
            std::fs::read(manifest_path(&second)).unwrap(),
            "manifest not bit-exact"
        );
    });
}

#[test]
fn evidence_template_bit_exactness() {
    check("evidence-template-bit-exactness", || {
        let mut graph = PolarGraph::new();
        let partition = |pos: &[&str], neg: &[&str]| Partition {
            positive: pos.iter().map(|s| s.to_string()).collect(),
            negative: neg.iter().map(|s| s.to_string()).collect(),
            uncertain: BTreeSet::new(),
            tau_star: 0.5,
            delta: 0.0,
            kappa: 0.0,
        };
        graph
            .add_visual_episode("img://1", &partition(&["dog", "cat"], &["wolf"]), None)
            .unwrap();
        graph
            .add_visual_episode("img://2", &partition(&["bird"], &["wolf"]), None)
            .unwrap();
        graph
            .add_visual_episode("img://3", &partition(&["tree"], &[]), None)
            .unwrap();
        let entities: BTreeSet<String> = std::iter::once("dog".to_string()).collect();
        let chunk = graph.add_text_chunk("a red apple", &entities).unwrap();

        let constraints = QueryConstraints::from_parts(
            vec!["dog".to_string()],
            vec!["wolf".to_string()],
            "q",
            vec![1.0, 0.0],
        );
        let results = vec![
            RankTuple { s_log: 1, s_sem: 0.9, node: chunk },
            RankTuple { s_log: 1, s_sem: 0.8, node: NodeId::visual("img://1") },
            RankTuple { s_log: 0, s_sem: 0.5, node: NodeId::visual("img://2") },
            RankTuple { s_log: 0, s_sem: 0.2, node: NodeId::visual("img://3") },
        ];
        let rendered: Vec<String> = evidence_items(&results, &constraints, &graph)
            .iter()
            .map(|item| item.render())
            .collect();
        let golden = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/evidence.golden"),
        )
        .unwrap();
        let produced = rendered.join("\n") + "\n";
        assert_eq!(produced.into_bytes(), golden.into_bytes(), "byte mismatch against golden file");

        // Status vocabulary sanity on the same fixture.
        let items = evidence_items(&results, &constraints, &graph);
        assert_eq!(items[0].status, EvidenceStatus::VerifiedPresent);
        assert_eq!(items[2].status, EvidenceStatus::VerifiedAbsentConstraint);
        assert_eq!(items[3].status, EvidenceStatus::Unverified);
    });
}

#[test]
fn entity_extraction_fallback_totality() {
    check("entity-extraction-fallback-totality", || {
        struct CannedExtractor {
            reply: String,
        }
        impl EntityExtractor for CannedExtractor {
            fn extract_reply(&self, _: &str) -> Result<String, polar_memory::ClientError> {
                Ok(self.reply.clone())
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE9D);
        let skeletons = [
            "", "EMPTY", "[\"a\"]", "[", "]", "<CONCEPTS>", "</CONCEPTS>",
            "<CONCEPTS></CONCEPTS>", "{\"positive\":[]}", "null", "[1,2,3]",
        ];
        for trial in 0..10_000u32 {
            let reply: String = if trial % 7 == 0 {
                // Mutated structured skeletons.
                let base = skeletons[rng.random_range(0..skeletons.len())];
                let mut bytes = base.as_bytes().to_vec();
                for _ in 0..rng.random_range(0..4) {
                    bytes.push(rng.random_range(0..=255));
                }
                String::from_utf8_lossy(&bytes).into_owned()
            } else {
                // Arbitrary byte strings.
                let len = rng.random_range(0..200);
                let bytes: Vec<u8> = (0..len).map(|_| rng.random_range(0..=255)).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            };
            let extractor = CannedExtractor { reply };
            let entities = extract_entities("some text", &extractor);
            for key in &entities {
                assert!(!key.is_empty(), "empty key extracted on trial {trial}");
                let renormalized = polar_memory::scoring::normalize_concept(key)
                    .expect("extracted key should renormalize")
                    .into_string();
                assert_eq!(&renormalized, key, "non-canonical key on trial {trial}");
            }
        }

        // The synthetic extractor path stays total too.
        let world = Arc::new(SyntheticWorld::new(1, 0.0));
        let clients = polar_memory::clients::SyntheticClients::new(world, 8);
        let entities = extract_entities("no vocabulary at all", &clients);
        assert!(entities.is_empty());
        let _ = EpisodeRef::new("unused");
        let _ = serialize_state(["a"], ["b"]);
    });
}
