//! Tools with known output distributions: the stochastic lookup classifier
//! and softmax-over-top-K retrieval.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::rng_from_seed;
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::pipeline::{render_tool_output, Tool, ToolCall};
use crate::posteriors::EmbeddingProvider;
use crate::prob::Categorical;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMissPolicy {
    #[default]
    UniformFallback,
    Error,
}

/// Canonical table key: each feature rounded to `decimals` places, comma-joined.
pub fn feature_key(features: &[f64], decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    features
        .iter()
        .map(|f| format!("{:.*}", decimals as usize, (f * scale).round() / scale + 0.0))
        .collect::<Vec<_>>()
        .join(",")
}

/// Picks exactly `⌊fraction·N⌋` ids: those with the smallest SHA-256 digest.
pub fn assign_noisy(question_ids: &[String], fraction: f64) -> HashSet<String> {
    let n_noisy = (fraction.clamp(0.0, 1.0) * question_ids.len() as f64).floor() as usize;
    let mut keyed: Vec<([u8; 32], &String)> = question_ids
        .iter()
        .map(|id| {
            let mut h = Sha256::new();
            h.update(b"noisy-profile\0");
            h.update(id.as_bytes());
            (h.finalize().into(), id)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().take(n_noisy).map(|(_, id)| id.clone()).collect()
}

/// Lookup table with injected uncertainty: noisy questions get a uniform
/// output distribution, the rest put `peak_prob` on the looked-up class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupClassifierTool {
    table: BTreeMap<String, String>,
    class_labels: Vec<String>,
    noisy: HashSet<String>,
    peak_prob: f64,
    key_rounding: u32,
    miss_policy: LookupMissPolicy,
    render_template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub noisy_fraction: f64,
    pub peak_prob: f64,
    pub key_rounding: u32,
    pub miss_policy: LookupMissPolicy,
    pub render_template: String,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            noisy_fraction: 0.5,
            peak_prob: 0.9,
            key_rounding: 1,
            miss_policy: LookupMissPolicy::UniformFallback,
            render_template: "The flower is {}".into(),
        }
    }
}

impl LookupClassifierTool {
    /// `rows` pairs feature vectors with gold class labels; `question_ids`
    /// is the population over which the noisy profile is assigned.
    pub fn new(
        rows: &[(Vec<f64>, String)],
        class_labels: Vec<String>,
        question_ids: &[String],
        settings: &ClassifierSettings,
    ) -> Result<Self> {
        let n = class_labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one class".into()));
        }
        let min_peak = 1.0 / n as f64;
        if !(settings.peak_prob <= 1.0 && (settings.peak_prob > min_peak || n == 1)) {
            return Err(Error::InvalidArgument(format!(
                "peak_prob {} must lie in ({min_peak}, 1]",
                settings.peak_prob
            )));
        }
        if !(0.0..=1.0).contains(&settings.noisy_fraction) {
            return Err(Error::InvalidArgument("noisy_fraction must lie in [0, 1]".into()));
        }
        render_tool_output("x", &settings.render_template)?;
        let mut table = BTreeMap::new();
        for (features, class) in rows {
            if !class_labels.contains(class) {
                return Err(Error::InvalidArgument(format!("unknown class {class:?}")));
            }
            let key = feature_key(features, settings.key_rounding);
            if let Some(prev) = table.insert(key.clone(), class.clone()) {
                if &prev != class {
                    return Err(Error::InvalidArgument(format!("key {key} maps to both {prev} and {class}")));
                }
            }
        }
        Ok(Self {
            table,
            class_labels,
            noisy: assign_noisy(question_ids, settings.noisy_fraction),
            peak_prob: settings.peak_prob,
            key_rounding: settings.key_rounding,
            miss_policy: settings.miss_policy,
            render_template: settings.render_template.clone(),
        })
    }

    /// Reads a delimited table whose last column is the class label.
    pub fn read_table(path: impl AsRef<Path>) -> Result<Vec<(Vec<f64>, String)>> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let n = rec.len();
            if n < 2 {
                return Err(Error::Config("classifier table needs features and a class column".into()));
            }
            let features = rec
                .iter()
                .take(n - 1)
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad feature {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((features, rec[n - 1].trim().to_string()));
        }
        Ok(rows)
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn is_noisy(&self, question_id: &str) -> bool {
        self.noisy.contains(question_id)
    }

    pub fn lookup(&self, features: &[f64]) -> Option<&str> {
        self.table.get(&feature_key(features, self.key_rounding)).map(String::as_str)
    }

    pub fn classifier_distribution(&self, call: &ToolCall, question_id: &str) -> Result<Categorical> {
        let features = call
            .parsed_features
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("tool call {:?} was not parsed", call.raw_text)))?;
        let uniform = || Categorical::uniform(self.class_labels.iter().cloned());
        if self.is_noisy(question_id) {
            return uniform();
        }
        let gold = match self.lookup(features) {
            Some(g) => g,
            None => {
                return match self.miss_policy {
                    LookupMissPolicy::UniformFallback => uniform(),
                    LookupMissPolicy::Error => Err(Error::LookupMiss(feature_key(features, self.key_rounding))),
                }
            }
        };
        let n = self.class_labels.len();
        let rest = if n > 1 { (1.0 - self.peak_prob) / (n - 1) as f64 } else { 0.0 };
        let probs = self.class_labels.iter().map(|c| if c == gold { self.peak_prob } else { rest }).collect();
        Categorical::new(self.class_labels.clone(), probs)
    }
}

impl Tool for LookupClassifierTool {
    fn distribution(&self, call: &ToolCall, question_id: &str) -> Result<Categorical> {
        self.classifier_distribution(call, question_id)
    }

    fn render(&self, label: &str) -> Result<String> {
        render_tool_output(label, &self.render_template)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

/// Top-K cosine retrieval with softmax(similarity / temperature) over the K.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTool {
    corpus: Vec<Document>,
    embeddings: Vec<Vec<f64>>,
    top_k: usize,
    n_draws: usize,
    temperature: f64,
}

impl RetrievalTool {
    /// Documents without a precomputed embedding are embedded with `embedder`.
    pub fn new(
        corpus: Vec<Document>,
        embedder: &dyn EmbeddingProvider,
        top_k: usize,
        n_draws: usize,
        temperature: f64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("retrieval corpus"));
        }
        if top_k == 0 || top_k > corpus.len() {
            return Err(Error::InvalidArgument(format!("top_k {top_k} must lie in [1, {}]", corpus.len())));
        }
        if n_draws == 0 {
            return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let embeddings = corpus
            .iter()
            .map(|d| match &d.embedding {
                Some(e) => Ok(e.clone()),
                None => embedder.embed(&d.text),
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::InvalidArgument("corpus embeddings differ in dimension".into()));
        }
        Ok(Self { corpus, embeddings, top_k, n_draws, temperature })
    }

    pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
        read_jsonl(path)
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn n_draws(&self) -> usize {
        self.n_draws
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.corpus.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn retrieval_distribution(&self, query: &[f64]) -> Result<Categorical> {
        if query.len() != self.embeddings[0].len() {
            return Err(Error::InvalidArgument(format!(
                "query dimension {} != corpus dimension {}",
                query.len(),
                self.embeddings[0].len()
            )));
        }
        let mut scored = self
            .corpus
            .iter()
            .zip(&self.embeddings)
            .map(|(d, e)| Ok((cosine_similarity(query, e)?, d.doc_id.as_str())))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|l, r| r.0.total_cmp(&l.0).then_with(|| l.1.cmp(r.1)));
        scored.truncate(self.top_k);
        let logits: Vec<f64> = scored.iter().map(|(s, _)| s / self.temperature).collect();
        Categorical::from_logits(scored.iter().map(|(_, id)| id.to_string()).collect(), &logits)
    }
}

pub fn sample_documents(dist: &Categorical, n_draws: usize, seed: u64) -> Vec<String> {
    let mut rng = rng_from_seed(seed);
    (0..n_draws).map(|_| dist.sample(&mut rng).to_string()).collect()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!("dimension mismatch {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("zero-norm embedding".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_tool_call;
    use crate::posteriors::HashEmbedder;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn classes(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("flower_type_{i}")).collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    fn tool(n_classes: usize, peak: f64, noisy_fraction: f64) -> LookupClassifierTool {
        let rows = vec![(vec![5.1, 3.5, 1.4, 0.2], "flower_type_1".to_string())];
        let settings = ClassifierSettings { peak_prob: peak, noisy_fraction, ..Default::default() };
        LookupClassifierTool::new(&rows, classes(n_classes), &ids(10), &settings).unwrap()
    }

    fn call() -> ToolCall {
        parse_tool_call("[5.1, 3.5, 1.4, 0.2]", 0.0)
    }

    #[test]
    fn noisy_profile_is_uniform() {
        let t = tool(3, 0.9, 1.0);
        let d = t.classifier_distribution(&call(), "q3").unwrap();
        assert_eq!(d.probs(), &[1.0 / 3.0; 3]);
        assert_abs_diff_eq!(d.entropy(), 1.0986122886681098, epsilon = 1e-12);
    }

    #[test]
    fn confident_profile_peaks_on_gold() {
        let t = tool(3, 0.9, 0.0);
        let d = t.classifier_distribution(&call(), "q3").unwrap();
        assert_abs_diff_eq!(d.prob("flower_type_1").unwrap(), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob("flower_type_2").unwrap(), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(d.entropy(), 0.394397691447443, epsilon = 1e-12);
        let d = tool(2, 1.0, 0.0).classifier_distribution(&call(), "q3").unwrap();
        assert_eq!(d.entropy(), 0.0);
    }

    #[test]
    fn lookup_rounds_features() {
        let t = tool(3, 0.9, 0.0);
        let c = parse_tool_call("[5.12, 3.48, 1.4, 0.2]", 0.0);
        assert_abs_diff_eq!(t.classifier_distribution(&c, "q0").unwrap().prob("flower_type_1").unwrap(), 0.9);
    }

    #[test]
    fn lookup_miss_policies() {
        let t = tool(3, 0.9, 0.0);
        let miss = parse_tool_call("[9.9, 9.9, 9.9, 9.9]", 0.0);
        assert_eq!(t.classifier_distribution(&miss, "q0").unwrap().probs(), &[1.0 / 3.0; 3]);
        let rows = vec![(vec![5.1], "flower_type_1".to_string())];
        let settings = ClassifierSettings { miss_policy: LookupMissPolicy::Error, noisy_fraction: 0.0, ..Default::default() };
        let strict = LookupClassifierTool::new(&rows, classes(3), &ids(2), &settings).unwrap();
        assert!(matches!(strict.classifier_distribution(&miss, "q0"), Err(Error::LookupMiss(_))));
    }

    #[test]
    fn invalid_settings_rejected() {
        let rows = vec![(vec![1.0], "flower_type_1".to_string())];
        let bad_peak = ClassifierSettings { peak_prob: 0.3, ..Default::default() };
        assert!(LookupClassifierTool::new(&rows, classes(3), &ids(2), &bad_peak).is_err());
        let conflicting = vec![(vec![1.0], "flower_type_1".to_string()), (vec![1.04], "flower_type_2".to_string())];
        assert!(LookupClassifierTool::new(&conflicting, classes(3), &ids(2), &ClassifierSettings::default()).is_err());
    }

    #[test]
    fn noisy_assignment_counts_exactly() {
        for n in [1usize, 2, 7, 120, 150] {
            for f in [0.0, 0.25, 0.5, 1.0] {
                assert_eq!(assign_noisy(&ids(n), f).len(), (f * n as f64).floor() as usize);
            }
        }
        assert_eq!(assign_noisy(&ids(50), 0.5), assign_noisy(&ids(50), 0.5));
    }

    #[test]
    fn distribution_is_deterministic_per_question() {
        let t = tool(3, 0.9, 0.5);
        for q in ids(10) {
            assert_eq!(t.classifier_distribution(&call(), &q).unwrap(), t.classifier_distribution(&call(), &q).unwrap());
        }
    }

    #[test]
    fn reads_delimited_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        std::fs::write(&path, "f1,f2,class\n1.0,2.0,flower_type_1\n3.5,4.0,flower_type_2\n").unwrap();
        let rows = LookupClassifierTool::read_table(&path).unwrap();
        assert_eq!(rows, vec![(vec![1.0, 2.0], "flower_type_1".into()), (vec![3.5, 4.0], "flower_type_2".into())]);
    }

    fn corpus_from_vectors(vs: &[Vec<f64>]) -> Vec<Document> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| Document { doc_id: format!("d{i}"), text: String::new(), embedding: Some(v.clone()) })
            .collect()
    }

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    #[test]
    fn equal_similarities_give_uniform_top5() {
        let docs = corpus_from_vectors(&vec![vec![1.0, 0.0]; 7]);
        let t = RetrievalTool::new(docs, &HashEmbedder::new(8), 5, 1, 0.1).unwrap();
        let d = t.retrieval_distribution(&[2.0, 0.0]).unwrap();
        assert_eq!(d.len(), 5);
        assert_abs_diff_eq!(d.entropy(), 1.6094379124341003, epsilon = 1e-12);
        // ties resolved by doc_id
        assert_eq!(d.labels(), &["d0", "d1", "d2", "d3", "d4"]);
    }

    #[test]
    fn peaked_similarities_give_low_entropy() {
        let docs = corpus_from_vectors(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]]);
        let t = RetrievalTool::new(docs, &HashEmbedder::new(8), 5, 1, 0.05).unwrap();
        assert!(t.retrieval_distribution(&[1.0, 0.0]).unwrap().entropy() < 0.01);
    }

    #[test]
    fn graded_similarities_entropy() {
        let sims = [0.9, 0.8, 0.7, 0.6, 0.5];
        let docs = corpus_from_vectors(&sims.iter().map(|s: &f64| unit(s.acos())).collect::<Vec<_>>());
        let t = RetrievalTool::new(docs, &HashEmbedder::new(8), 5, 1, 0.1).unwrap();
        let d = t.retrieval_distribution(&[1.0, 0.0]).unwrap();
        // softmax-entropy oracle (mpmath): 0.999972828275399
        assert_abs_diff_eq!(d.entropy(), 0.999972828275399, epsilon = 1e-9);
    }

    #[test]
    fn retrieval_errors() {
        let docs = corpus_from_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(RetrievalTool::new(docs.clone(), &HashEmbedder::new(8), 3, 1, 0.1).is_err());
        let t = RetrievalTool::new(docs, &HashEmbedder::new(8), 2, 1, 0.1).unwrap();
        assert!(t.retrieval_distribution(&[0.0, 0.0]).is_err());
        assert!(t.retrieval_distribution(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_documents() {
        assert_eq!(sample_documents(&Categorical::point_mass("d9"), 1, 0), vec!["d9"]);
        let uni = Categorical::uniform((0..5).map(|i| format!("d{i}"))).unwrap();
        assert_eq!(sample_documents(&uni, 3, 1).len(), 3);
        let draws = sample_documents(&uni, 50_000, 2);
        for i in 0..5 {
            let f = draws.iter().filter(|d| **d == format!("d{i}")).count() as f64 / 50_000.0;
            assert!((f - 0.2).abs() < 0.01, "{f}");
        }
        assert_eq!(sample_documents(&uni, 20, 3), sample_documents(&uni, 20, 3));
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 0.707107, epsilon = 1e-6);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn retrieval_entropy_monotone_in_temperature(angles in prop::collection::vec(0.0f64..3.1, 5..9), t1 in 0.01f64..2.0, dt in 0.0f64..2.0) {
            let docs = corpus_from_vectors(&angles.iter().map(|a| unit(*a)).collect::<Vec<_>>());
            let emb = HashEmbedder::new(8);
            let lo = RetrievalTool::new(docs.clone(), &emb, 5, 1, t1).unwrap();
            let hi = RetrievalTool::new(docs, &emb, 5, 1, t1 + dt).unwrap();
            let q = [1.0, 0.0];
            prop_assert!(hi.retrieval_distribution(&q).unwrap().entropy() >= lo.retrieval_distribution(&q).unwrap().entropy() - 1e-12);
        }

        #[test]
        fn gold_class_dominates(n in 2usize..8, peak_frac in 0.01f64..1.0) {
            let min = 1.0 / n as f64;
            let peak = min + (1.0 - min) * peak_frac;
            let rows = vec![(vec![1.0], "flower_type_1".to_string())];
            let settings = ClassifierSettings { peak_prob: peak, noisy_fraction: 0.0, ..Default::default() };
            let t = LookupClassifierTool::new(&rows, classes(n), &ids(1), &settings).unwrap();
            let d = t.classifier_distribution(&parse_tool_call("[1.0]", 0.0), "q0").unwrap();
            let gold = d.prob("flower_type_1").unwrap();
            for (l, p) in d.iter() {
                if l != "flower_type_1" { prop_assert!(gold > p); }
            }
        }
    }
}
