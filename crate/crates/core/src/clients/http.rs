//! OpenAI-compatible HTTP backend.
//!
//! Talks to `{endpoint}/v1/chat/completions` for the scorer, proposer,
//! extractor, query parser, and generator, and `{endpoint}/v1/embeddings`
//! for the encoders. The API key is read from the configured environment
//! variable at call time; absent keys simply omit the Authorization header
//! so local endpoints keep working.

use serde_json::{json, Value};

use super::{
    with_retries, BinaryScorer, ClientConfig, ClientError, ConceptProposer, EntityExtractor,
    EpisodeRef, Generator, QueryConceptParser, TextEncoder, VisualEncoder,
};

const ENTITY_EXTRACTION_PROMPT: &str = "You are an information extraction engine.\n\
Extract key entities, methods, datasets, metrics, and core topics.\n\
OUTPUT RULES (must follow):\n\
1) Output ONLY a valid JSON array of strings.\n\
2) No explanation, no extra text.\n\
3) If you cannot comply, output [] only.\n\n\
TEXT:\n";

const QUERY_PARSE_PROMPT: &str = "Extract key visual concepts for retrieval from the question.\n\
Return strictly valid JSON with keys 'positive' and 'negative'.\n\
'positive': concepts that SHOULD appear in the target memory.\n\
'negative': concepts explicitly stated as NOT wanted. If none, use [].\n\
Output ONLY valid JSON and nothing else.\n\
Format: {\"positive\": [...], \"negative\": [...]}\n\n\
Question: ";

const PROPOSER_PROMPT: &str = "List key visual concepts for retrieval as a comma-separated list. \
Cover category/identity, shape/parts/structure, visual attributes, and state/condition if visible. \
Output strictly as a comma-separated list of short phrases (max 40 items).";

pub struct HttpClients {
    config: ClientConfig,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpClients {
    pub fn new(config: ClientConfig, dim: usize) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout)
            .build();
        Self { config, dim, agent }
    }

    fn chat_url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.config.endpoint_url.trim_end_matches('/')
        )
    }

    fn embeddings_url(&self) -> String {
        format!(
            "{}/v1/embeddings",
            self.config.endpoint_url.trim_end_matches('/')
        )
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, ClientError> {
        let mut request = self.agent.post(url).set("content-type", "application/json");
        if let Ok(key) = std::env::var(&self.config.api_key_env_var) {
            if !key.is_empty() {
                request = request.set("authorization", &format!("Bearer {key}"));
            }
        }
        let response = request
            .send_json(body.clone())
            .map_err(|e| ClientError::Backend(format!("POST {url}: {e}")))?;
        response
            .into_json::<Value>()
            .map_err(|e| ClientError::Backend(format!("invalid JSON from {url}: {e}")))
    }

    fn chat(&self, body: Value) -> Result<Value, ClientError> {
        with_retries(self.config.max_retries, |_| self.post(&self.chat_url(), &body))
    }

    fn chat_text(&self, body: Value) -> Result<String, ClientError> {
        let reply = self.chat(body)?;
        reply_content(&reply)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Backend("chat reply carried no message content".into()))
    }

    fn embed(&self, input: &str) -> Result<Vec<f32>, ClientError> {
        let body = json!({
            "model": self.config.model_name,
            "input": input,
        });
        let reply = with_retries(self.config.max_retries, |_| {
            self.post(&self.embeddings_url(), &body)
        })?;
        let vector = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| ClientError::Backend("embeddings reply missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(0.0) as f32)
            .collect::<Vec<f32>>();
        if vector.len() != self.dim {
            return Err(ClientError::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        Ok(vector)
    }
}

/// Builds a single-user-turn chat body, attaching the episode image as an
/// image-URL content part when a URI is available.
pub(crate) fn build_chat_body(
    model: &str,
    prompt: &str,
    image_uri: Option<&str>,
    max_tokens: u32,
    want_logprobs: bool,
) -> Value {
    let content = match image_uri {
        Some(uri) => json!([
            {"type": "image_url", "image_url": {"url": uri}},
            {"type": "text", "text": prompt},
        ]),
        None => json!(prompt),
    };
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
        "max_tokens": max_tokens,
    });
    if want_logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(5);
    }
    body
}

pub(crate) fn reply_content(reply: &Value) -> Option<&str> {
    reply["choices"][0]["message"]["content"].as_str()
}

/// Yes-probability of a chat reply. When token log-probabilities are
/// exposed, the mass on yes-variants of the first generated token is used;
/// otherwise the reply text maps Yes -> 1.0, No -> 0.0, anything else 0.5.
pub(crate) fn yes_probability(reply: &Value) -> f64 {
    if let Some(top) = reply["choices"][0]["logprobs"]["content"][0]["top_logprobs"].as_array() {
        let mut mass = 0.0f64;
        let mut any = false;
        for entry in top {
            if let (Some(token), Some(logprob)) =
                (entry["token"].as_str(), entry["logprob"].as_f64())
            {
                any = true;
                if matches!(token.trim(), "Yes" | "yes" | "YES") {
                    mass += logprob.exp();
                }
            }
        }
        if any {
            return mass.clamp(0.0, 1.0);
        }
    }
    match reply_content(reply).map(str::trim) {
        Some(text) if text.eq_ignore_ascii_case("yes") => 1.0,
        Some(text) if text.eq_ignore_ascii_case("no") => 0.0,
        _ => 0.5,
    }
}

impl BinaryScorer for HttpClients {
    fn binary_score(
        &self,
        episode: &EpisodeRef,
        _concept: &str,
        prompt: &str,
        _template_index: usize,
    ) -> Result<f64, ClientError> {
        let body = build_chat_body(
            &self.config.model_name,
            prompt,
            episode.uri.as_deref(),
            5,
            true,
        );
        let reply = self.chat(body)?;
        Ok(yes_probability(&reply))
    }
}

impl ConceptProposer for HttpClients {
    fn propose_reply(&self, episode: &EpisodeRef) -> Result<String, ClientError> {
        let body = build_chat_body(
            &self.config.model_name,
            PROPOSER_PROMPT,
            episode.uri.as_deref(),
            512,
            false,
        );
        self.chat_text(body)
    }
}

impl EntityExtractor for HttpClients {
    fn extract_reply(&self, text: &str) -> Result<String, ClientError> {
        let prompt = format!("{ENTITY_EXTRACTION_PROMPT}{text}");
        let body = build_chat_body(&self.config.model_name, &prompt, None, 512, false);
        self.chat_text(body)
    }
}

impl QueryConceptParser for HttpClients {
    fn parse_query_reply(&self, raw_query: &str, repair: bool) -> Result<String, ClientError> {
        let mut prompt = format!("{QUERY_PARSE_PROMPT}{raw_query}");
        if repair {
            prompt.push_str(
                "\n\nYour previous reply was not valid JSON. Reply with ONLY the JSON object.",
            );
        }
        let body = build_chat_body(&self.config.model_name, &prompt, None, 256, false);
        self.chat_text(body)
    }
}

impl TextEncoder for HttpClients {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>, ClientError> {
        self.embed(text)
    }
}

impl VisualEncoder for HttpClients {
    fn dimension(&self) -> usize {
        self.dim
    }

    /// Chat endpoints expose no image-embedding route, so the episode URI
    /// stands in as the embedding input.
    fn encode_visual(&self, episode: &EpisodeRef) -> Result<Vec<f32>, ClientError> {
        let key = episode.uri.as_deref().unwrap_or(&episode.id);
        self.embed(key)
    }
}

pub(crate) fn build_generate_body(model: &str, segments: &[String], image_refs: &[String]) -> Value {
    let mut content = Vec::new();
    for uri in image_refs {
        content.push(json!({"type": "image_url", "image_url": {"url": uri}}));
    }
    content.push(json!({"type": "text", "text": segments.join("\n")}));
    json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
    })
}

impl Generator for HttpClients {
    fn generate(&self, segments: &[String], image_refs: &[String]) -> Result<String, ClientError> {
        let body = build_generate_body(&self.config.model_name, segments, image_refs);
        self.chat_text(body)
    }
}
