//! Clustering of sampled answers into meaning classes.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::prob::ScoredSample;

/// Disjoint, covering partition of sample indices into non-empty classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticPartition {
    classes: Vec<Vec<usize>>,
    samples: Vec<ScoredSample>,
}

impl SemanticPartition {
    pub fn new(classes: Vec<Vec<usize>>, samples: Vec<ScoredSample>) -> Result<Self> {
        let mut seen = vec![false; samples.len()];
        for class in &classes {
            if class.is_empty() {
                return Err(Error::InvalidArgument("empty semantic class".into()));
            }
            for &i in class {
                match seen.get_mut(i) {
                    Some(s) if !*s => *s = true,
                    Some(_) => return Err(Error::InvalidArgument(format!("sample {i} in two classes"))),
                    None => return Err(Error::InvalidArgument(format!("sample index {i} out of range"))),
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("partition does not cover every sample".into()));
        }
        Ok(Self { classes, samples })
    }

    /// Every sample in its own class.
    pub fn singletons(samples: Vec<ScoredSample>) -> Self {
        let classes = (0..samples.len()).map(|i| vec![i]).collect();
        Self { classes, samples }
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn samples(&self) -> &[ScoredSample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, sample: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(&sample))
    }
}

/// Directional entailment judgement between two answers.
///
/// Implementations must return `true` for `entails(s, s)`.
pub trait EquivalenceOracle: Send + Sync {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool>;

    /// Symmetric oracles need only one call per pair.
    fn is_symmetric(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

pub struct ExactMatch;

impl EquivalenceOracle for ExactMatch {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        Ok(premise == hypothesis)
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "exact"
    }
}

/// Equality after lowercasing, stripping punctuation and collapsing whitespace.
pub struct NormalizedMatch;

impl EquivalenceOracle for NormalizedMatch {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        Ok(normalized_match_oracle(premise, hypothesis))
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn name(&self) -> &str {
        "normalized"
    }
}

pub fn normalize_text(s: &str) -> String {
    let stripped: String = s
        .chars()
        .map(|c| if c.is_ascii_punctuation() && c != '_' { ' ' } else { c })
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn normalized_match_oracle(a: &str, b: &str) -> bool {
    normalize_text(a) == normalize_text(b)
}

/// Natural-language-inference service client.
///
/// Wire format: POST `{"premise", "hypothesis", "context"}`, reply
/// `{"label": "entailment" | "neutral" | "contradiction"}`.
pub struct NliOracle {
    endpoint: String,
    context: String,
    client: JsonClient,
}

impl NliOracle {
    pub fn new(endpoint: impl Into<String>, context: impl Into<String>, timeout: Duration) -> Self {
        Self { endpoint: endpoint.into(), context: context.into(), client: JsonClient::new(timeout, 1) }
    }

    pub fn with_context(&self, context: impl Into<String>) -> Self {
        Self { endpoint: self.endpoint.clone(), context: context.into(), client: self.client.clone() }
    }
}

impl EquivalenceOracle for NliOracle {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        if premise == hypothesis {
            return Ok(true);
        }
        let reply = self
            .client
            .post(&self.endpoint, None, &json!({ "premise": premise, "hypothesis": hypothesis, "context": self.context }))
            .map_err(|e| e.context("nli oracle"))?;
        let label = reply
            .get("label")
            .and_then(|l| l.as_str())
            .ok_or_else(|| Error::Upstream(format!("nli reply missing label: {reply}")))?;
        match label.to_ascii_lowercase().as_str() {
            "entailment" => Ok(true),
            "neutral" | "contradiction" => Ok(false),
            other => Err(Error::Upstream(format!("unknown nli label {other:?}"))),
        }
    }

    fn name(&self) -> &str {
        "nli"
    }
}

/// Greedy bidirectional-entailment clustering: each sample joins the first
/// class whose representative (first member) it mutually entails.
pub fn cluster(samples: Vec<ScoredSample>, oracle: &dyn EquivalenceOracle) -> Result<SemanticPartition> {
    if samples.is_empty() {
        return Err(Error::Empty("samples to cluster"));
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut home = None;
        for (c, members) in classes.iter().enumerate() {
            let rep = &samples[members[0]].text;
            let forward = oracle.entails(&s.text, rep)?;
            let both = forward && (oracle.is_symmetric() || oracle.entails(rep, &s.text)?);
            if both {
                home = Some(c);
                break;
            }
        }
        match home {
            Some(c) => classes[c].push(i),
            None => classes.push(vec![i]),
        }
    }
    SemanticPartition::new(classes, samples)
}
