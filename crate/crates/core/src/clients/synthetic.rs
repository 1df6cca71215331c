//! Deterministic synthetic backends.
//!
//! Every reply is a pure function of `(seed, inputs)`: the scorer draws its
//! noise from a stream keyed on `(seed, episode, concept, template index)`,
//! the encoders hash inputs onto the unit sphere, and the proposer/extractor
//! read from the world definition. Two runs with equal seeds produce
//! bit-identical pipeline outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BinaryScorer, ClientError, ConceptProposer, EntityExtractor, EpisodeRef, Generator,
    QueryConceptParser, TextEncoder, TokenCounter, VisualEncoder, WhitespaceTokenCounter,
};

/// Ground truth for a synthetic corpus: which concepts are actually present
/// in each episode, how noisy the scorer is, and the seed every derived
/// stream is keyed on.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub episodes: BTreeMap<String, BTreeSet<String>>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Full concept vocabulary; the extractor and query parser match against
    /// it, and default proposals draw distractors from it.
    pub vocabulary: Vec<String>,
    /// Per-episode candidate lists the proposer replies with. Episodes not
    /// listed here fall back to truth plus seeded distractors.
    pub proposals: BTreeMap<String, Vec<String>>,
}

impl SyntheticWorld {
    pub fn new(seed: u64, noise_sigma: f64) -> Self {
        Self {
            episodes: BTreeMap::new(),
            noise_sigma,
            seed,
            vocabulary: Vec::new(),
            proposals: BTreeMap::new(),
        }
    }

    pub fn add_episode(
        &mut self,
        id: impl Into<String>,
        present: impl IntoIterator<Item = String>,
    ) {
        self.episodes.insert(id.into(), present.into_iter().collect());
    }

    pub fn truth(&self, episode_id: &str) -> Option<&BTreeSet<String>> {
        self.episodes.get(episode_id)
    }
}

/// One object implementing every client trait against a [`SyntheticWorld`].
#[derive(Clone)]
pub struct SyntheticClients {
    world: Arc<SyntheticWorld>,
    dim: usize,
    counter: WhitespaceTokenCounter,
}

impl SyntheticClients {
    pub fn new(world: Arc<SyntheticWorld>, dim: usize) -> Self {
        Self {
            world,
            dim,
            counter: WhitespaceTokenCounter,
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn derived_rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut state = splitmix64(self.world.seed ^ 0x9e37_79b9_7f4a_7c15);
        for part in parts {
            state = splitmix64(state ^ fnv1a(part.as_bytes()));
        }
        ChaCha8Rng::seed_from_u64(state)
    }

    fn hash_to_sphere(&self, namespace: &str, input: &str) -> Vec<f32> {
        let mut rng = self.derived_rng(&[namespace, input]);
        let mut vector: Vec<f64> = (0..self.dim).map(|_| gaussian(&mut rng)).collect();
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // A zero draw from a continuous distribution cannot happen, but
            // keep the output on the sphere regardless.
            vector[0] = 1.0;
            return vector.into_iter().map(|v| v as f32).collect();
        }
        vector.into_iter().map(|v| (v / norm) as f32).collect()
    }
}

impl BinaryScorer for SyntheticClients {
    fn binary_score(
        &self,
        episode: &EpisodeRef,
        concept: &str,
        _prompt: &str,
        template_index: usize,
    ) -> Result<f64, ClientError> {
        let present = self
            .world
            .truth(&episode.id)
            .map(|truth| truth.contains(concept))
            .unwrap_or(false);
        let base = if present { 1.0 } else { 0.0 };
        if self.world.noise_sigma == 0.0 {
            return Ok(base);
        }
        let index = template_index.to_string();
        let mut rng = self.derived_rng(&["score", &episode.id, concept, &index]);
        let noisy = base + gaussian(&mut rng) * self.world.noise_sigma;
        Ok(noisy.clamp(0.0, 1.0))
    }
}

impl ConceptProposer for SyntheticClients {
    fn propose_reply(&self, episode: &EpisodeRef) -> Result<String, ClientError> {
        if let Some(candidates) = self.world.proposals.get(&episode.id) {
            return Ok(candidates.join(", "));
        }
        let truth = self
            .world
            .truth(&episode.id)
            .ok_or_else(|| ClientError::Backend(format!("unknown episode {}", episode.id)))?;
        let mut candidates: Vec<String> = truth.iter().cloned().collect();
        // Seeded distractors: absent vocabulary terms, up to half the truth
        // size, so the partition always has something to reject.
        let mut rng = self.derived_rng(&["propose", &episode.id]);
        let absent: Vec<&String> = self
            .world
            .vocabulary
            .iter()
            .filter(|c| !truth.contains(*c))
            .collect();
        let wanted = (truth.len() / 2).max(1).min(absent.len());
        let mut picked = BTreeSet::new();
        while picked.len() < wanted {
            picked.insert(rng.random_range(0..absent.len()));
        }
        candidates.extend(picked.into_iter().map(|i| absent[i].clone()));
        Ok(candidates.join(", "))
    }
}

impl EntityExtractor for SyntheticClients {
    fn extract_reply(&self, text: &str) -> Result<String, ClientError> {
        let lower = text.to_lowercase();
        let found: Vec<&String> = self
            .world
            .vocabulary
            .iter()
            .filter(|term| lower.contains(term.as_str()))
            .collect();
        Ok(serde_json::to_string(&found).expect("string list serializes"))
    }
}

impl QueryConceptParser for SyntheticClients {
    fn parse_query_reply(&self, raw_query: &str, _repair: bool) -> Result<String, ClientError> {
        // Convention for the test double: vocabulary terms before the word
        // "without" are positive, terms after it are negative.
        let lower = raw_query.to_lowercase();
        let (pos_text, neg_text) = match lower.split_once("without") {
            Some((pos, neg)) => (pos.to_string(), neg.to_string()),
            None => (lower.clone(), String::new()),
        };
        let collect = |haystack: &str| -> Vec<String> {
            self.world
                .vocabulary
                .iter()
                .filter(|term| haystack.contains(term.as_str()))
                .cloned()
                .collect()
        };
        let reply = serde_json::json!({
            "positive": collect(&pos_text),
            "negative": collect(&neg_text),
        });
        Ok(reply.to_string())
    }
}

impl TextEncoder for SyntheticClients {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        Ok(self.hash_to_sphere("text", text))
    }
}

impl VisualEncoder for SyntheticClients {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode_visual(&self, episode: &EpisodeRef) -> Result<Vec<f32>, ClientError> {
        let key = episode.uri.as_deref().unwrap_or(&episode.id);
        Ok(self.hash_to_sphere("visual", key))
    }
}

impl TokenCounter for SyntheticClients {
    fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    fn truncate(&self, text: &str, cap: usize) -> String {
        self.counter.truncate(text, cap)
    }
}

impl Generator for SyntheticClients {
    /// Echo double: the reply is the concatenation of segment texts.
    fn generate(&self, segments: &[String], _image_refs: &[String]) -> Result<String, ClientError> {
        Ok(segments.concat())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
