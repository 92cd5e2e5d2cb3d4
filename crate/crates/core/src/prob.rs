//! Entropy primitives: exact Shannon entropy of categorical distributions,
//! Monte-Carlo estimators over sampled sequences, and the differential
//! entropy of independent Gaussians.
//!
//! All quantities are in nats.

use std::collections::HashSet;
use std::f64::consts::{E, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::SemanticPartition;

/// Normalization tolerance for [`Categorical`].
pub const NORM_TOLERANCE: f64 = 1e-9;

/// A finite probability distribution over labelled outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    labels: Vec<String>,
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(labels: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        if labels.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} labels but {} probabilities",
                labels.len(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("bad probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {sum}")));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidDistribution(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, probs })
    }

    pub fn uniform<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let n = labels.len();
        Self::new(labels, vec![1.0 / n as f64; n])
    }

    pub fn point_mass(label: impl Into<String>) -> Self {
        Self { labels: vec![label.into()], probs: vec![1.0] }
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Self::new(labels, weights.into_iter().map(|w| w / total).collect())
    }

    /// Softmax over logits (max-shifted).
    pub fn from_logits(labels: Vec<String>, logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite logit".into()));
        }
        Self::from_weights(labels, softmax(logits))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prob(&self, label: &str) -> Option<f64> {
        self.index_of(label).map(|i| self.probs[i])
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.labels.iter().map(String::as_str).zip(self.probs.iter().copied())
    }

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    /// Inverse-CDF draw; returns the outcome index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding slack: fall back to the last outcome with mass
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(self.probs.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        &self.labels[self.sample_index(rng)]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(dist: &Categorical) -> f64 {
    entropy_of_probs(&dist.probs)
}

pub(crate) fn entropy_of_probs(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    h.max(0.0)
}

/// A sampled sequence and its log-probability under the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub text: String,
    /// Natural-log probability of the whole sequence.
    pub log_prob: f64,
    /// Token count, used by length normalization.
    #[serde(default = "one")]
    pub n_tokens: usize,
}

fn one() -> usize {
    1
}

impl ScoredSample {
    pub fn new(text: impl Into<String>, log_prob: f64) -> Self {
        let text = text.into();
        let n_tokens = text.split_whitespace().count().max(1);
        Self { text, log_prob, n_tokens }
    }

    pub fn with_tokens(text: impl Into<String>, log_prob: f64, n_tokens: usize) -> Self {
        Self { text: text.into(), log_prob, n_tokens }
    }

    pub fn prob(&self) -> f64 {
        self.log_prob.exp()
    }
}

/// How a sequence log-probability is derived from its tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceScoring {
    /// Sum of token log-probs.
    #[default]
    Sum,
    /// Mean token log-prob.
    LengthNormalized,
}

/// `−(1/N) Σ log p(yᵢ)` over the samples.
pub fn mc_predictive_entropy(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("answer samples"));
    }
    if let Some(s) = samples.iter().find(|s| !s.log_prob.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite log-prob for {:?}", s.text)));
    }
    let mean = samples.iter().map(|s| s.log_prob).sum::<f64>() / samples.len() as f64;
    Ok(-mean)
}

/// `−(1/|C|) Σⱼ log Σ_{y∈Cⱼ} p(y)`.
///
/// Within a class each distinct sequence contributes its probability once,
/// so repeated draws of the same string do not inflate the class mass.
pub fn mc_semantic_entropy(partition: &SemanticPartition) -> Result<f64> {
    let classes = partition.classes();
    if classes.is_empty() {
        return Err(Error::Empty("semantic partition"));
    }
    let samples = partition.samples();
    let mut total = 0.0;
    for (j, class) in classes.iter().enumerate() {
        let mut seen = HashSet::new();
        let lps: Vec<f64> = class
            .iter()
            .map(|&i| &samples[i])
            .filter(|s| seen.insert(s.text.as_str()))
            .map(|s| s.log_prob)
            .collect();
        let mass = log_sum_exp(&lps);
        if !mass.is_finite() {
            return Err(Error::ZeroMassClass { class: j });
        }
        total += mass;
    }
    Ok(-total / classes.len() as f64)
}

/// Entropy of class occupancy frequencies, for generators without log-probs.
pub fn frequency_semantic_entropy(partition: &SemanticPartition) -> Result<f64> {
    let classes = partition.classes();
    if classes.is_empty() {
        return Err(Error::Empty("semantic partition"));
    }
    let n: usize = classes.iter().map(Vec::len).sum();
    let probs: Vec<f64> = classes.iter().map(|c| c.len() as f64 / n as f64).collect();
    Ok(entropy_of_probs(&probs))
}

/// `Σ_d ½ ln(2πe σ²_d)` for independent Gaussian dimensions.
pub fn gaussian_entropy(variances: &[f64]) -> Result<f64> {
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {v}")));
    }
    Ok(variances.iter().map(|v| 0.5 * (2.0 * PI * E * v).ln()).sum())
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
