//! Boundary to external model services.
//!
//! Every service the engine consumes — binary concept scorer, open-set
//! concept proposer, entity extractor, query-concept parser, text/visual
//! encoders, token counter, generator — is a trait here, with one
//! OpenAI-compatible HTTP implementation and one fully deterministic
//! synthetic implementation for tests and the benchmark harness.

mod http;
mod synthetic;

pub use http::HttpClients;
pub use synthetic::{SyntheticClients, SyntheticWorld};

use std::time::Duration;

use thiserror::Error;

use crate::scoring::{normalize_concept, ConceptCandidate};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("encoder dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Handle to one visual episode. `uri` points at the underlying image for
/// backends that can consume it; synthetic backends key off `id` alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRef {
    pub id: String,
    pub uri: Option<String>,
}

impl EpisodeRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: None,
        }
    }

    pub fn with_uri(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: Some(uri.into()),
        }
    }
}

/// Connection settings for a remote backend. The credential itself is read
/// from the named environment variable at call time and never stored or
/// logged.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub api_key_env_var: String,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000".into(),
            model_name: "default".into(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            max_parallel: 4,
            api_key_env_var: "POLAR_MEMORY_API_KEY".into(),
        }
    }
}

/// Answers one binary presence question, returning the yes-probability.
pub trait BinaryScorer: Send + Sync {
    /// `prompt` is the rendered interrogation template; `template_index`
    /// identifies the ensemble member so deterministic backends can vary
    /// their noise per template.
    fn binary_score(
        &self,
        episode: &EpisodeRef,
        concept: &str,
        prompt: &str,
        template_index: usize,
    ) -> Result<f64, ClientError>;
}

/// Produces the raw open-set concept proposal reply for an episode
/// (comma-separated short phrases).
pub trait ConceptProposer: Send + Sync {
    fn propose_reply(&self, episode: &EpisodeRef) -> Result<String, ClientError>;
}

/// Produces the raw entity-extraction reply for a text chunk.
pub trait EntityExtractor: Send + Sync {
    fn extract_reply(&self, text: &str) -> Result<String, ClientError>;
}

/// Produces the raw query-parse reply: a JSON object with `positive` and
/// `negative` string lists. `repair` marks the one retry after a malformed
/// first reply.
pub trait QueryConceptParser: Send + Sync {
    fn parse_query_reply(&self, raw_query: &str, repair: bool) -> Result<String, ClientError>;
}

pub trait TextEncoder: Send + Sync {
    fn dimension(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Vec<f32>, ClientError>;
}

pub trait VisualEncoder: Send + Sync {
    fn dimension(&self) -> usize;
    fn encode_visual(&self, episode: &EpisodeRef) -> Result<Vec<f32>, ClientError>;
}

pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// Keeps the first `cap` tokens, preserving the original text up to the
    /// end of the cap-th token.
    fn truncate(&self, text: &str, cap: usize) -> String;
}

pub trait Generator: Send + Sync {
    fn generate(&self, segments: &[String], image_refs: &[String]) -> Result<String, ClientError>;
}

/// Token counter used when no model tokenizer is configured: a token is a
/// maximal run of non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenCounter;

impl TokenCounter for WhitespaceTokenCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate(&self, text: &str, cap: usize) -> String {
        let mut seen = 0usize;
        let mut in_token = false;
        for (offset, ch) in text.char_indices() {
            if ch.is_whitespace() {
                in_token = false;
            } else if !in_token {
                in_token = true;
                seen += 1;
                if seen > cap {
                    return text[..offset].trim_end().to_string();
                }
            }
        }
        text.to_string()
    }
}

/// Runs `f` up to `max_retries + 1` times, sleeping with doubling backoff
/// between attempts, and returns the first success or the last error.
pub fn with_retries<T>(
    max_retries: u32,
    mut f: impl FnMut(u32) -> Result<T, ClientError>,
) -> Result<T, ClientError> {
    const BACKOFF_BASE_MS: u64 = 25;
    let mut last_err = None;
    for attempt in 0..=max_retries {
        match f(attempt) {
            Ok(value) => return Ok(value),
            Err(err) => {
                last_err = Some(err);
                if attempt < max_retries {
                    let backoff = BACKOFF_BASE_MS << attempt.min(6);
                    std::thread::sleep(Duration::from_millis(backoff.min(1_000)));
                }
            }
        }
    }
    Err(last_err.expect("at least one attempt runs"))
}

/// Applies `f` to every item with at most `max_parallel` calls in flight.
/// Results come back in input order, so order-sensitive aggregation gives
/// the same answer as a sequential run.
pub fn bounded_parallel_map<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_parallel.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> =
        items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

/// Parses an open-set proposal reply: comma-separated phrases, normalized,
/// de-duplicated in order, capped at 40 items.
pub fn propose_concepts(
    episode: &EpisodeRef,
    proposer: &dyn ConceptProposer,
    max_retries: u32,
) -> Result<Vec<ConceptCandidate>, ClientError> {
    const MAX_PROPOSED: usize = 40;
    let reply = with_retries(max_retries, |_| proposer.propose_reply(episode))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for piece in reply.split(',') {
        if let Ok(candidate) = normalize_concept(piece) {
            if seen.insert(candidate.clone()) {
                out.push(candidate);
                if out.len() == MAX_PROPOSED {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Parses an entity-extraction reply, trying three formats in order:
/// a JSON string array, line-based output with the `EMPTY` sentinel, and
/// `<CONCEPTS>...</CONCEPTS>` tag wrapping. Total: any reply that fits none
/// of them yields the empty set.
pub fn extract_entities(
    text: &str,
    extractor: &dyn EntityExtractor,
) -> std::collections::BTreeSet<String> {
    let reply = match extractor.extract_reply(text) {
        Ok(reply) => reply,
        Err(_) => return Default::default(),
    };
    parse_entity_reply(&reply)
}

pub(crate) fn parse_entity_reply(reply: &str) -> std::collections::BTreeSet<String> {
    let trimmed = reply.trim();

    if let Ok(items) = serde_json::from_str::<Vec<String>>(trimmed) {
        return normalize_all(items.iter().map(String::as_str));
    }

    // Line-based replies must not be tag-wrapped; those fall through to the
    // third parser so the tag markers are stripped rather than kept as keys.
    let tagged = trimmed.contains("<CONCEPTS>");
    if !tagged {
        if trimmed == "EMPTY" {
            return Default::default();
        }
        if !trimmed.is_empty() {
            return normalize_all(trimmed.lines());
        }
        return Default::default();
    }

    let open = trimmed.find("<CONCEPTS>").map(|i| i + "<CONCEPTS>".len());
    let close = trimmed.rfind("</CONCEPTS>");
    match (open, close) {
        (Some(start), Some(end)) if start <= end => normalize_all(trimmed[start..end].lines()),
        _ => Default::default(),
    }
}

fn normalize_all<'a>(items: impl Iterator<Item = &'a str>) -> std::collections::BTreeSet<String> {
    items
        .filter_map(|item| normalize_concept(item).ok())
        .map(ConceptCandidate::into_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct CountingProposer {
        reply: String,
        fail_first: u32,
        calls: AtomicU32,
    }

    impl ConceptProposer for CountingProposer {
        fn propose_reply(&self, _: &EpisodeRef) -> Result<String, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(ClientError::Backend("flaky".into()))
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    #[test]
    fn proposal_reply_splits_on_commas() {
        let proposer = CountingProposer {
            reply: "axis, legend, line plot".into(),
            fail_first: 0,
            calls: AtomicU32::new(0),
        };
        let out = propose_concepts(&EpisodeRef::new("ep"), &proposer, 0).unwrap();
        let keys: Vec<&str> = out.iter().map(|c| c.as_str()).collect();
        assert_eq!(keys, vec!["axis", "legend", "line plot"]);
    }

    #[test]
    fn proposal_reply_capped_at_forty() {
        let reply = (0..60).map(|i| format!("item {i}")).collect::<Vec<_>>().join(", ");
        let proposer = CountingProposer {
            reply,
            fail_first: 0,
            calls: AtomicU32::new(0),
        };
        let out = propose_concepts(&EpisodeRef::new("ep"), &proposer, 0).unwrap();
        assert_eq!(out.len(), 40);
        assert_eq!(out[0].as_str(), "item 0");
        assert_eq!(out[39].as_str(), "item 39");
    }

    #[test]
    fn proposal_deduplicates_after_normalization() {
        let proposer = CountingProposer {
            reply: "Dog, dog ,  DOG, cat".into(),
            fail_first: 0,
            calls: AtomicU32::new(0),
        };
        let out = propose_concepts(&EpisodeRef::new("ep"), &proposer, 0).unwrap();
        let keys: Vec<&str> = out.iter().map(|c| c.as_str()).collect();
        assert_eq!(keys, vec!["dog", "cat"]);
    }

    #[test]
    fn retry_budget_is_exactly_max_retries_plus_one() {
        let proposer = CountingProposer {
            reply: "x".into(),
            fail_first: u32::MAX,
            calls: AtomicU32::new(0),
        };
        let result = propose_concepts(&EpisodeRef::new("ep"), &proposer, 2);
        assert!(result.is_err());
        assert_eq!(proposer.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_stops_on_first_success() {
        let proposer = CountingProposer {
            reply: "x".into(),
            fail_first: 1,
            calls: AtomicU32::new(0),
        };
        let out = propose_concepts(&EpisodeRef::new("ep"), &proposer, 2).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(proposer.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn entity_reply_json_array() {
        let parsed = parse_entity_reply(r#"["mscoco","transformer"]"#);
        assert_eq!(
            parsed.into_iter().collect::<Vec<_>>(),
            vec!["mscoco", "transformer"]
        );
    }

    #[test]
    fn entity_reply_empty_sentinel() {
        assert!(parse_entity_reply("EMPTY").is_empty());
        assert!(parse_entity_reply("  EMPTY  ").is_empty());
    }

    #[test]
    fn entity_reply_line_based() {
        let parsed = parse_entity_reply("Axis\nLegend\n");
        assert_eq!(parsed.into_iter().collect::<Vec<_>>(), vec!["axis", "legend"]);
    }

    #[test]
    fn entity_reply_tag_wrapped() {
        let parsed = parse_entity_reply("<CONCEPTS>axis\nlegend</CONCEPTS>");
        assert_eq!(parsed.into_iter().collect::<Vec<_>>(), vec!["axis", "legend"]);
        assert!(parse_entity_reply("<CONCEPTS></CONCEPTS>").is_empty());
    }

    #[test]
    fn entity_reply_garbage_yields_empty() {
        assert!(parse_entity_reply("").is_empty());
        assert!(parse_entity_reply("<CONCEPTS>half open").is_empty());
        assert!(parse_entity_reply("   \n  \t ").is_empty());
    }

    #[test]
    fn whitespace_counter_counts_and_truncates() {
        let counter = WhitespaceTokenCounter;
        assert_eq!(counter.count("a red  apple"), 3);
        assert_eq!(counter.count(""), 0);
        assert_eq!(counter.truncate("one two three four", 2), "one two");
        assert_eq!(counter.truncate("one two", 5), "one two");
        let text: String = (0..500).map(|i| format!("w{i} ")).collect();
        let cut = counter.truncate(&text, 100);
        assert_eq!(counter.count(&cut), 100);
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let doubled = bounded_parallel_map(&items, 4, |&x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let single = bounded_parallel_map(&items, 1, |&x| x * 2);
        assert_eq!(single, doubled);
    }

    #[test]
    fn bounded_map_caps_in_flight_calls() {
        let in_flight = AtomicU32::new(0);
        let peak = AtomicU32::new(0);
        let items: Vec<u32> = (0..64).collect();
        bounded_parallel_map(&items, 4, |_| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            in_flight.fetch_sub(1, Ordering::SeqCst);
        });
        let observed = peak.load(Ordering::SeqCst);
        assert!(observed <= 4, "saw {observed} calls in flight");
        assert!(observed >= 2, "workers never overlapped");
    }
}
