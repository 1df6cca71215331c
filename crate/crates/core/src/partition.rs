//! Adaptive distributional partitioning of a confidence spectrum.
//!
//! Scores are split into positive / negative / uncertain concept sets by a
//! variance-maximizing threshold search over the anchored spectrum, plus a
//! dynamic margin `delta = kappa * sigma_w` around the threshold. Virtual
//! anchor scores 0 and 1 are injected before the search so the support is
//! always bimodal and the threshold lands strictly inside (0, 1).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::ConfidenceSpectrum;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("threshold search needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("threshold search needs at least two distinct values")]
    DegenerateSpectrum,
    #[error("kappa must be non-negative, got {0}")]
    InvalidKappa(f64),
}

/// Statistics at the variance-maximizing threshold.
///
/// `omega_*` are class mass fractions (they sum to 1), `mu_*` the class
/// means, and `sigma_w` the mass-weighted sum of within-class standard
/// deviations. The rejection class takes scores `s <= tau_star`, the
/// validation class `s > tau_star`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub tau_star: f64,
    pub omega_val: f64,
    pub omega_rej: f64,
    pub mu_val: f64,
    pub mu_rej: f64,
    pub sigma_w: f64,
}

/// Three-way split of a spectrum's concepts around `tau_star`.
///
/// Positive: `s > tau_star + delta`; negative: `s < tau_star - delta`;
/// uncertain: `|s - tau_star| <= delta`. The sets are pairwise disjoint and
/// cover the spectrum exactly; anchors never appear in them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub positive: BTreeSet<String>,
    pub negative: BTreeSet<String>,
    pub uncertain: BTreeSet<String>,
    pub tau_star: f64,
    pub delta: f64,
    pub kappa: f64,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len() + self.uncertain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends the two virtual prior scores 0 and 1 to the input.
///
/// The anchors take part in the threshold search and its statistics but are
/// never assigned to an output set.
pub fn inject_anchors(scores: &[f64]) -> Result<Vec<f64>, PartitionError> {
    for &s in scores {
        if !(0.0..=1.0).contains(&s) || s.is_nan() {
            return Err(PartitionError::OutOfRange(s));
        }
    }
    let mut anchored = Vec::with_capacity(scores.len() + 2);
    anchored.extend_from_slice(scores);
    anchored.push(0.0);
    anchored.push(1.0);
    Ok(anchored)
}

/// Finds the threshold maximizing the inter-class variance
/// `omega_val * omega_rej * (mu_val - mu_rej)^2`.
///
/// The objective is piecewise-constant between data points, so candidates
/// are the midpoints between consecutive distinct sorted values; the search
/// over them is exact. Ties go to the smallest threshold.
pub fn otsu_threshold(anchored_scores: &[f64]) -> Result<ThresholdResult, PartitionError> {
    let n = anchored_scores.len();
    if n < 2 {
        return Err(PartitionError::TooFewSamples(n));
    }
    let mut sorted = anchored_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        return Err(PartitionError::DegenerateSpectrum);
    }

    // Prefix sums let each candidate split be evaluated in O(1).
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &s in &sorted {
        prefix.push(prefix.last().unwrap() + s);
    }
    let total: f64 = prefix[n];
    let nf = n as f64;

    let mut best: Option<(f64, f64, usize)> = None; // (objective, tau, rej_count)
    let mut i = 0;
    while i < n - 1 {
        // Skip to the end of a run of equal values; the split sits between
        // distinct neighbors.
        if sorted[i + 1] == sorted[i] {
            i += 1;
            continue;
        }
        let tau = (sorted[i] + sorted[i + 1]) / 2.0;
        let rej_count = i + 1;
        let val_count = n - rej_count;
        let omega_rej = rej_count as f64 / nf;
        let omega_val = val_count as f64 / nf;
        let mu_rej = prefix[rej_count] / rej_count as f64;
        let mu_val = (total - prefix[rej_count]) / val_count as f64;
        let objective = omega_val * omega_rej * (mu_val - mu_rej) * (mu_val - mu_rej);
        let better = match best {
            None => true,
            Some((best_obj, _, _)) => objective > best_obj,
        };
        if better {
            best = Some((objective, tau, rej_count));
        }
        i += 1;
    }

    let (_, tau_star, rej_count) = best.expect("distinct values guarantee a candidate");
    let val_count = n - rej_count;
    let mu_rej = prefix[rej_count] / rej_count as f64;
    let mu_val = (total - prefix[rej_count]) / val_count as f64;
    let sigma_rej = class_std(&sorted[..rej_count], mu_rej);
    let sigma_val = class_std(&sorted[rej_count..], mu_val);
    let omega_rej = rej_count as f64 / nf;
    let omega_val = val_count as f64 / nf;

    Ok(ThresholdResult {
        tau_star,
        omega_val,
        omega_rej,
        mu_val,
        mu_rej,
        sigma_w: omega_val * sigma_val + omega_rej * sigma_rej,
    })
}

fn class_std(values: &[f64], mean: f64) -> f64 {
    if values.len() <= 1 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Partitions a spectrum with the anchored threshold and margin
/// `delta = kappa * sigma_w`. Boundary equality lands in `uncertain`.
pub fn partition_spectrum(
    spectrum: &ConfidenceSpectrum,
    kappa: f64,
) -> Result<Partition, PartitionError> {
    if kappa < 0.0 || kappa.is_nan() {
        return Err(PartitionError::InvalidKappa(kappa));
    }
    let values: Vec<f64> = spectrum.scores.values().copied().collect();
    let anchored = inject_anchors(&values)?;
    let threshold = otsu_threshold(&anchored)?;
    let delta = kappa * threshold.sigma_w;

    let mut partition = Partition {
        positive: BTreeSet::new(),
        negative: BTreeSet::new(),
        uncertain: BTreeSet::new(),
        tau_star: threshold.tau_star,
        delta,
        kappa,
    };
    for (concept, &score) in &spectrum.scores {
        if score > threshold.tau_star + delta {
            partition.positive.insert(concept.clone());
        } else if score < threshold.tau_star - delta {
            partition.negative.insert(concept.clone());
        } else {
            partition.uncertain.insert(concept.clone());
        }
    }
    Ok(partition)
}
