//! Ensemble verification of candidate concepts.
//!
//! One visual episode and a set of candidate concepts go in; a calibrated
//! confidence spectrum comes out. Each concept is put to the scorer once per
//! interrogation template and the yes-probabilities are averaged, so a
//! single badly-phrased question cannot decide a concept's fate.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{bounded_parallel_map, with_retries, BinaryScorer, ClientError, EpisodeRef};

pub const CONCEPT_PLACEHOLDER: &str = "{c}";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("concept is empty after normalization")]
    EmptyConcept,
    #[error("template must contain exactly one {CONCEPT_PLACEHOLDER} placeholder: {0:?}")]
    InvalidTemplate(String),
    #[error("duplicate template: {0:?}")]
    DuplicateTemplate(String),
    #[error("template ensemble is empty")]
    EmptyEnsemble,
    #[error("no candidates to score")]
    NoCandidates,
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(#[from] ClientError),
    #[error("failed to read template file: {0}")]
    TemplateFile(#[from] std::io::Error),
}

/// A normalized concept string: lowercased, trimmed, internal whitespace
/// collapsed to single spaces. Construction goes through
/// [`normalize_concept`] so every instance is already in canonical form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptCandidate(String);

impl ConceptCandidate {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for ConceptCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonicalizes a raw concept string. Case and whitespace variants of the
/// same phrase map to the same candidate; the mapping is idempotent.
pub fn normalize_concept(raw: &str) -> Result<ConceptCandidate, ScoringError> {
    let normalized = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if normalized.is_empty() {
        return Err(ScoringError::EmptyConcept);
    }
    Ok(ConceptCandidate(normalized))
}

/// Ordered set of interrogation templates, each containing exactly one
/// `{c}` placeholder. Templates are pairwise distinct, so each renders a
/// distinct prompt for a fixed concept.
#[derive(Debug, Clone)]
pub struct TemplateEnsemble {
    templates: Vec<String>,
}

impl TemplateEnsemble {
    pub fn new(templates: Vec<String>) -> Result<Self, ScoringError> {
        if templates.is_empty() {
            return Err(ScoringError::EmptyEnsemble);
        }
        let mut seen = std::collections::BTreeSet::new();
        for template in &templates {
            if template.matches(CONCEPT_PLACEHOLDER).count() != 1 {
                return Err(ScoringError::InvalidTemplate(template.clone()));
            }
            if !seen.insert(template.clone()) {
                return Err(ScoringError::DuplicateTemplate(template.clone()));
            }
        }
        Ok(Self { templates })
    }

    /// Loads one template per line from a UTF-8 file, skipping blank lines.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScoringError> {
        let text = std::fs::read_to_string(path)?;
        let templates: Vec<String> = text
            .lines()
            .map(str::trim_end)
            .filter(|line| !line.trim().is_empty())
            .map(str::to_string)
            .collect();
        Self::new(templates)
    }

    /// The built-in eight-member ensemble used when no template file is
    /// configured.
    pub fn default_ensemble() -> Self {
        Self::new(
            [
                "Is there a {c} in this image? Answer Yes or No.",
                "Does this image contain a {c}? Answer Yes or No.",
                "Can you see a {c} in this image? Answer Yes or No.",
                "Is a {c} visible in this image? Answer Yes or No.",
                "Does the image show a {c}? Answer Yes or No.",
                "Is a {c} present in this picture? Answer Yes or No.",
                "Looking at this image, is there a {c}? Answer Yes or No.",
                "Would you say this image contains a {c}? Answer Yes or No.",
            ]
            .into_iter()
            .map(str::to_string)
            .collect(),
        )
        .expect("built-in templates are valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn render(&self, index: usize, concept: &ConceptCandidate) -> String {
        self.templates[index].replace(CONCEPT_PLACEHOLDER, concept.as_str())
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }
}

/// Calibrated per-episode confidence map: concept -> mean yes-probability
/// over the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSpectrum {
    pub episode_id: String,
    pub scores: BTreeMap<String, f64>,
    pub template_count: usize,
}

/// Knobs for [`score_concepts`]: how often a failed template call is
/// retried and how many calls may be in flight at once.
#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub max_retries: u32,
    pub max_parallel: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            max_retries: 2,
            max_parallel: 4,
        }
    }
}

/// Scores every candidate as the arithmetic mean of the scorer's
/// yes-probability over all templates.
///
/// Calls run with bounded parallelism but land in per-(concept, template)
/// slots, so the spectrum equals the sequential result. If any call still
/// fails after the retry budget the whole spectrum is aborted; partial
/// spectra are never returned, keeping scores comparable across concepts.
pub fn score_concepts(
    episode: &EpisodeRef,
    candidates: &[ConceptCandidate],
    ensemble: &TemplateEnsemble,
    scorer: &dyn BinaryScorer,
    options: ScoringOptions,
) -> Result<ConfidenceSpectrum, ScoringError> {
    if candidates.is_empty() {
        return Err(ScoringError::NoCandidates);
    }
    let mut unique: Vec<&ConceptCandidate> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for candidate in candidates {
        if seen.insert(candidate.as_str()) {
            unique.push(candidate);
        }
    }

    let tasks: Vec<(usize, usize)> = (0..unique.len())
        .flat_map(|c| (0..ensemble.len()).map(move |t| (c, t)))
        .collect();
    let results = bounded_parallel_map(&tasks, options.max_parallel, |&(c, t)| {
        let concept = unique[c];
        let prompt = ensemble.render(t, concept);
        with_retries(options.max_retries, |_| {
            scorer.binary_score(episode, concept.as_str(), &prompt, t)
        })
    });

    let mut sums = vec![0.0f64; unique.len()];
    for ((c, t), result) in tasks.iter().zip(results) {
        let score = result?;
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(ScoringError::ScorerUnavailable(ClientError::Backend(format!(
                "scorer returned {score} outside [0, 1] for {:?} on template {t}",
                unique[*c].as_str()
            ))));
        }
        sums[*c] += score;
    }

    let scores = unique
        .iter()
        .zip(&sums)
        .map(|(concept, sum)| (concept.as_str().to_string(), sum / ensemble.len() as f64))
        .collect();
    Ok(ConfidenceSpectrum {
        episode_id: episode.id.clone(),
        scores,
        template_count: ensemble.len(),
    })
}
