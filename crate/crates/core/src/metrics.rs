//! Assembles the uncertainty metrics from component entropies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{mc_predictive_entropy, mc_semantic_entropy, Categorical, ScoredSample};
use crate::semantics::SemanticPartition;

/// Component entropies in nats. Optional terms come from fitted posteriors
/// (tool mode) or retrieval (RAG mode).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTerms {
    pub h_y_given_zx: f64,
    pub h_c_given_zx: f64,
    pub h_z_given_a: Option<f64>,
    pub h_a_given_x: Option<f64>,
    pub h_z_given_ya: Option<f64>,
    pub h_a_given_xy: Option<f64>,
    pub h_z_given_x: Option<f64>,
    pub h_z_given_yx: Option<f64>,
}

fn need(term: Option<f64>, name: &'static str) -> Result<f64> {
    match term {
        Some(v) if v.is_finite() => Ok(v),
        Some(v) => Err(Error::InvalidArgument(format!("{name} is not finite: {v}"))),
        None => Err(Error::MissingTerm(name)),
    }
}

fn finite(v: f64, name: &'static str) -> Result<f64> {
    need(Some(v), name)
}

impl EntropyTerms {
    /// Discrete terms must be non-negative; differential ones may not be.
    pub fn validate(&self) -> Result<()> {
        let discrete = [
            (Some(self.h_y_given_zx), "h_y_given_zx"),
            (Some(self.h_c_given_zx), "h_c_given_zx"),
            (self.h_z_given_a, "h_z_given_a"),
            (self.h_z_given_ya, "h_z_given_ya"),
            (self.h_z_given_x, "h_z_given_x"),
            (self.h_z_given_yx, "h_z_given_yx"),
        ];
        for (v, name) in discrete {
            if let Some(v) = v {
                if !v.is_finite() || v < -1e-12 {
                    return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
                }
            }
        }
        for (v, name) in [(self.h_a_given_x, "h_a_given_x"), (self.h_a_given_xy, "h_a_given_xy")] {
            if let Some(v) = v {
                finite(v, name)?;
            }
        }
        Ok(())
    }

    /// Element-wise mean; an optional term survives only if present in all.
    pub fn mean(terms: &[EntropyTerms]) -> Result<EntropyTerms> {
        if terms.is_empty() {
            return Err(Error::Empty("entropy terms"));
        }
        let n = terms.len() as f64;
        let avg = |f: fn(&EntropyTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&EntropyTerms) -> Option<f64>| {
            terms.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        Ok(EntropyTerms {
            h_y_given_zx: avg(|t| t.h_y_given_zx),
            h_c_given_zx: avg(|t| t.h_c_given_zx),
            h_z_given_a: avg_opt(|t| t.h_z_given_a),
            h_a_given_x: avg_opt(|t| t.h_a_given_x),
            h_z_given_ya: avg_opt(|t| t.h_z_given_ya),
            h_a_given_xy: avg_opt(|t| t.h_a_given_xy),
            h_z_given_x: avg_opt(|t| t.h_z_given_x),
            h_z_given_yx: avg_opt(|t| t.h_z_given_yx),
        })
    }
}

/// `H(y|z,x) + H(z|a)`.
pub fn sta_p(terms: &EntropyTerms) -> Result<f64> {
    Ok(finite(terms.h_y_given_zx, "h_y_given_zx")? + need(terms.h_z_given_a, "h_z_given_a")?)
}

/// `H(C|z,x) + H(z|a)`.
pub fn sta_s(terms: &EntropyTerms) -> Result<f64> {
    Ok(finite(terms.h_c_given_zx, "h_c_given_zx")? + need(terms.h_z_given_a, "h_z_given_a")?)
}

fn full(first: f64, terms: &EntropyTerms) -> Result<f64> {
    Ok(first + need(terms.h_z_given_a, "h_z_given_a")? + need(terms.h_a_given_x, "h_a_given_x")?
        - need(terms.h_z_given_ya, "h_z_given_ya")?
        - need(terms.h_a_given_xy, "h_a_given_xy")?)
}

/// `H(y|z,x) + H(z|a) + H(a|x) − H(z|y,a) − H(a|x,y)`; not clamped.
pub fn full_predictive_entropy(terms: &EntropyTerms) -> Result<f64> {
    full(finite(terms.h_y_given_zx, "h_y_given_zx")?, terms)
}

/// As [`full_predictive_entropy`] with `H(C|z,x)` as the first term.
pub fn full_semantic_entropy(terms: &EntropyTerms) -> Result<f64> {
    full(finite(terms.h_c_given_zx, "h_c_given_zx")?, terms)
}

/// `H(y|z,x) + H(z|x) − H(z|y,x)`.
pub fn rag_predictive_entropy(terms: &EntropyTerms) -> Result<f64> {
    Ok(finite(terms.h_y_given_zx, "h_y_given_zx")? + need(terms.h_z_given_x, "h_z_given_x")?
        - need(terms.h_z_given_yx, "h_z_given_yx")?)
}

/// `H(y|z,x) + H(z|x)`, or `H(C|z,x) + H(z|x)` when `semantic`.
pub fn rag_sta(terms: &EntropyTerms, semantic: bool) -> Result<f64> {
    let first = if semantic {
        finite(terms.h_c_given_zx, "h_c_given_zx")?
    } else {
        finite(terms.h_y_given_zx, "h_y_given_zx")?
    };
    Ok(first + need(terms.h_z_given_x, "h_z_given_x")?)
}

/// Final-answer predictive and semantic entropies plus the tool entropy.
pub fn baseline_metrics(
    answers: &[ScoredSample],
    partition: &SemanticPartition,
    tool_entropy: f64,
) -> Result<(f64, f64, f64)> {
    Ok((mc_predictive_entropy(answers)?, mc_semantic_entropy(partition)?, finite(tool_entropy, "tool_entropy")?))
}

/// Mean of `H(z|a_i)` over the tool distributions of sampled calls.
pub fn mean_tool_entropy(dists: &[Categorical]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Empty("tool distributions"));
    }
    Ok(dists.iter().map(Categorical::entropy).sum::<f64>() / dists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    StaS,
    StaP,
    SemFull,
    PredFull,
    SemFa,
    PredFa,
    ToolEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tool,
    Rag,
}

impl MetricKind {
    /// Table column order.
    pub const ALL: [MetricKind; 7] = [
        MetricKind::StaS,
        MetricKind::StaP,
        MetricKind::SemFull,
        MetricKind::PredFull,
        MetricKind::SemFa,
        MetricKind::PredFa,
        MetricKind::ToolEntropy,
    ];

    pub fn for_mode(mode: Mode) -> Vec<MetricKind> {
        match mode {
            Mode::Tool => Self::ALL.to_vec(),
            Mode::Rag => Self::ALL.into_iter().filter(|k| !matches!(k, MetricKind::SemFull | MetricKind::PredFull)).collect(),
        }
    }

    pub fn column_name(self) -> &'static str {
        match self {
            MetricKind::StaS => "STA_S",
            MetricKind::StaP => "STA_P",
            MetricKind::SemFull => "Sem. Entropy",
            MetricKind::PredFull => "Pred. Entropy",
            MetricKind::SemFa => "Sem. Entropy FA",
            MetricKind::PredFa => "Pred. Entropy FA",
            MetricKind::ToolEntropy => "Tool Entropy",
        }
    }

    pub fn from_column_name(name: &str) -> Option<MetricKind> {
        Self::ALL.into_iter().find(|k| k.column_name() == name)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column_name())
    }
}

/// Per-question metrics. Full decompositions are `None` in RAG mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub question_id: String,
    pub mode: Mode,
    pub sta_s: f64,
    pub sta_p: f64,
    pub sem_full: Option<f64>,
    pub pred_full: Option<f64>,
    pub sem_fa: f64,
    pub pred_fa: f64,
    pub tool_entropy: f64,
    pub terms: EntropyTerms,
    /// Flags such as a negative full decomposition, reported unclamped.
    #[serde(default)]
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl UncertaintyReport {
    /// Tool mode. The final-answer baselines share the answer samples with
    /// the first STA term, so `sta_p = pred_fa + tool_entropy` exactly.
    pub fn tool_mode(question_id: &str, terms: EntropyTerms) -> Result<Self> {
        terms.validate()?;
        let tool_entropy = need(terms.h_z_given_a, "h_z_given_a")?;
        let full_available = terms.h_a_given_x.is_some() && terms.h_z_given_ya.is_some() && terms.h_a_given_xy.is_some();
        let (sem_full, pred_full) = if full_available {
            (Some(full_semantic_entropy(&terms)?), Some(full_predictive_entropy(&terms)?))
        } else {
            (None, None)
        };
        let mut diagnostics = Vec::new();
        if pred_full.is_some_and(|v| v < 0.0) {
            diagnostics.push("negative_pred_full".into());
        }
        if sem_full.is_some_and(|v| v < 0.0) {
            diagnostics.push("negative_sem_full".into());
        }
        Ok(Self {
            question_id: question_id.into(),
            mode: Mode::Tool,
            sta_s: sta_s(&terms)?,
            sta_p: sta_p(&terms)?,
            sem_full,
            pred_full,
            sem_fa: terms.h_c_given_zx,
            pred_fa: terms.h_y_given_zx,
            tool_entropy,
            terms,
            diagnostics,
            metadata: BTreeMap::new(),
        })
    }

    /// RAG mode: STA pair, final-answer baselines and retrieval entropy.
    pub fn rag_mode(question_id: &str, terms: EntropyTerms) -> Result<Self> {
        terms.validate()?;
        let tool_entropy = need(terms.h_z_given_x, "h_z_given_x")?;
        let mut metadata = BTreeMap::new();
        metadata.insert("sta_s_form".into(), "H(C|z,x) + H(z|x)".into());
        Ok(Self {
            question_id: question_id.into(),
            mode: Mode::Rag,
            sta_s: rag_sta(&terms, true)?,
            sta_p: rag_sta(&terms, false)?,
            sem_full: None,
            pred_full: None,
            sem_fa: terms.h_c_given_zx,
            pred_fa: terms.h_y_given_zx,
            tool_entropy,
            terms,
            diagnostics: Vec::new(),
            metadata,
        })
    }

    pub fn value(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::StaS => Some(self.sta_s),
            MetricKind::StaP => Some(self.sta_p),
            MetricKind::SemFull => self.sem_full,
            MetricKind::PredFull => self.pred_full,
            MetricKind::SemFa => Some(self.sem_fa),
            MetricKind::PredFa => Some(self.pred_fa),
            MetricKind::ToolEntropy => Some(self.tool_entropy),
        }
    }

    /// Number of metrics present.
    pub fn metric_count(&self) -> usize {
        MetricKind::ALL.iter().filter(|k| self.value(**k).is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::rng_from_seed;
    use crate::pipeline::{brute_force_joint, brute_force_rag, RagToySystem, ToySystem};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn terms(y: f64, z: f64) -> EntropyTerms {
        EntropyTerms { h_y_given_zx: y, h_c_given_zx: y, h_z_given_a: Some(z), ..Default::default() }
    }

    #[test]
    fn sta_examples() {
        assert_abs_diff_eq!(sta_p(&terms(0.5, 0.693147)).unwrap(), 1.193147, epsilon = 1e-12);
        assert_eq!(sta_p(&terms(0.37, 0.0)).unwrap(), 0.37);
        assert_abs_diff_eq!(sta_p(&terms(0.2, 3f64.ln())).unwrap(), 1.298612, epsilon = 1e-6);
        let missing = EntropyTerms { h_y_given_zx: 0.1, ..Default::default() };
        assert!(matches!(sta_p(&missing), Err(Error::MissingTerm("h_z_given_a"))));
        assert!(matches!(sta_s(&missing), Err(Error::MissingTerm(_))));
    }

    fn full_terms(v: [f64; 5]) -> EntropyTerms {
        EntropyTerms {
            h_y_given_zx: v[0],
            h_c_given_zx: v[0],
            h_z_given_a: Some(v[1]),
            h_a_given_x: Some(v[2]),
            h_z_given_ya: Some(v[3]),
            h_a_given_xy: Some(v[4]),
            ..Default::default()
        }
    }

    #[test]
    fn full_decomposition_arithmetic() {
        assert_eq!(full_predictive_entropy(&full_terms([0.0; 5])).unwrap(), 0.0);
        assert_eq!(full_predictive_entropy(&full_terms([1.0; 5])).unwrap(), 1.0);
        assert!(matches!(full_predictive_entropy(&terms(1.0, 1.0)), Err(Error::MissingTerm("h_a_given_x"))));
        let mut t = full_terms([0.3, 0.2, 0.1, 0.5, 0.4]);
        t.h_c_given_zx = 0.25;
        assert_abs_diff_eq!(full_semantic_entropy(&t).unwrap(), 0.25 + 0.2 + 0.1 - 0.5 - 0.4, epsilon = 1e-12);
        // negative results are reported raw and flagged
        let r = UncertaintyReport::tool_mode("q", t).unwrap();
        assert!(r.pred_full.unwrap() < 0.0);
        assert!(r.diagnostics.contains(&"negative_pred_full".to_string()));
    }

    #[test]
    fn exact_terms_reproduce_joint_entropy() {
        for seed in 0..50 {
            let mut rng = rng_from_seed(seed);
            let (na, nz, ny) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..6));
            let sys = ToySystem::random(&mut rng, na, nz, ny);
            let e = brute_force_joint(&sys).unwrap().terms;
            let t = full_terms([e.h_y_given_zx, e.h_z_given_a, e.h_a_given_x, e.h_z_given_ya, e.h_a_given_xy]);
            assert_abs_diff_eq!(full_predictive_entropy(&t).unwrap(), e.h_y_given_x, epsilon = 1e-9);
        }
    }

    #[test]
    fn strong_tool_bound() {
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let sys = ToySystem::strong_tool(&mut rng, 4, 6, 0.01);
            let e = brute_force_joint(&sys).unwrap().terms;
            let sta = sta_p(&terms(e.h_y_given_zx, e.h_z_given_a)).unwrap();
            assert!((sta - e.h_y_given_x).abs() <= 0.05, "seed {seed}: {sta} vs {}", e.h_y_given_x);
        }
    }

    #[test]
    fn rag_forms() {
        let point = EntropyTerms { h_y_given_zx: 0.4, h_c_given_zx: 0.3, h_z_given_x: Some(0.0), ..Default::default() };
        assert_eq!(rag_sta(&point, false).unwrap(), 0.4);
        assert_eq!(rag_sta(&point, true).unwrap(), 0.3);
        let uni = EntropyTerms { h_y_given_zx: 0.3, h_c_given_zx: 0.3, h_z_given_x: Some(5f64.ln()), ..Default::default() };
        assert_abs_diff_eq!(rag_sta(&uni, false).unwrap(), 0.3 + 1.609438, epsilon = 1e-6);
        assert!(matches!(rag_predictive_entropy(&uni), Err(Error::MissingTerm("h_z_given_yx"))));
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let sys = RagToySystem::random(&mut rng, 3, 4);
            let e = brute_force_rag(&sys).unwrap();
            let t = EntropyTerms {
                h_y_given_zx: e.h_y_given_zx,
                h_c_given_zx: e.h_y_given_zx,
                h_z_given_x: Some(e.h_z_given_x),
                h_z_given_yx: Some(e.h_z_given_yx),
                ..Default::default()
            };
            assert_abs_diff_eq!(rag_predictive_entropy(&t).unwrap(), e.h_y_given_x, epsilon = 1e-9);
        }
    }

    #[test]
    fn baselines_from_samples() {
        let faithful = vec![ScoredSample::new("purple", 0.0); 5];
        let part = SemanticPartition::new(vec![(0..5).collect()], faithful.clone()).unwrap();
        assert_eq!(baseline_metrics(&faithful, &part, 0.3).unwrap(), (0.0, 0.0, 0.3));
        let two = vec![ScoredSample::new("a", 0.5f64.ln()), ScoredSample::new("b", 0.5f64.ln())];
        let part = SemanticPartition::singletons(two.clone());
        let (pred, sem, _) = baseline_metrics(&two, &part, 0.0).unwrap();
        assert_abs_diff_eq!(sem, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(pred, mc_predictive_entropy(&two).unwrap());
        assert_eq!(sem, mc_semantic_entropy(&part).unwrap());
    }

    #[test]
    fn singleton_partition_makes_semantic_equal_predictive() {
        let answers = vec![ScoredSample::new("a", -0.4), ScoredSample::new("b", -1.7), ScoredSample::new("c", -2.3)];
        let part = SemanticPartition::singletons(answers.clone());
        let (pred, sem, _) = baseline_metrics(&answers, &part, 0.0).unwrap();
        let mut t = full_terms([pred, 0.5, 0.3, 0.2, 0.1]);
        t.h_c_given_zx = sem;
        assert_abs_diff_eq!(full_semantic_entropy(&t).unwrap(), full_predictive_entropy(&t).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn report_metric_counts() {
        let r = UncertaintyReport::tool_mode("q", full_terms([0.1, 0.2, 0.3, 0.1, 0.1])).unwrap();
        assert_eq!(r.metric_count(), 7);
        let rag = EntropyTerms { h_y_given_zx: 0.1, h_c_given_zx: 0.1, h_z_given_x: Some(0.2), ..Default::default() };
        let r = UncertaintyReport::rag_mode("q", rag).unwrap();
        assert_eq!(r.metric_count(), 5);
        assert_eq!(MetricKind::for_mode(Mode::Rag).len(), 5);
        assert_eq!(MetricKind::from_column_name("Sem. Entropy FA"), Some(MetricKind::SemFa));
    }

    #[test]
    fn mean_terms_drop_partial_options() {
        let a = full_terms([1.0, 1.0, 1.0, 1.0, 1.0]);
        let b = terms(3.0, 2.0);
        let m = EntropyTerms::mean(&[a, b]).unwrap();
        assert_eq!(m.h_y_given_zx, 2.0);
        assert_eq!(m.h_z_given_a, Some(1.5));
        assert_eq!(m.h_a_given_x, None);
    }

    #[test]
    fn tool_entropy_is_mean_over_calls() {
        let d = [Categorical::uniform(["a", "b"]).unwrap(), Categorical::point_mass("a")];
        assert_abs_diff_eq!(mean_tool_entropy(&d).unwrap(), 0.5 * 2f64.ln(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn sta_additivity(y in 0.0f64..10.0, z in 0.0f64..10.0) {
            let t = terms(y, z);
            prop_assert_eq!(sta_p(&t).unwrap() - z, (y + z) - z);
            let r = UncertaintyReport::tool_mode("q", t).unwrap();
            prop_assert_eq!(r.sta_p, r.pred_fa + r.tool_entropy);
            prop_assert_eq!(r.sta_s, r.sem_fa + r.tool_entropy);
        }

        #[test]
        fn full_identity_matches_independent_sum(v in prop::array::uniform5(-5.0f64..5.0), c in 0.0f64..3.0) {
            let mut t = full_terms(v);
            t.h_c_given_zx = c;
            prop_assert!((full_semantic_entropy(&t).unwrap() - (c + v[1] + v[2] - v[3] - v[4])).abs() < 1e-12);
        }
    }
}
