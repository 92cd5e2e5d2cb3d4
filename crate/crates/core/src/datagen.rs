//! Synthetic tool-calling QA datasets from per-class Gaussian mixtures, and
//! the retrieval QA corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, rng_from_seed};
use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorRequest, Stage};
use crate::io::{read_jsonl, write_jsonl};
use crate::prob::{log_sum_exp, Categorical};
use crate::tools::{feature_key, Document, LookupClassifierTool};

pub const SCHEMA_VERSION: u32 = 1;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EM_MAX_ITERATIONS: usize = 200;
pub const EM_TOLERANCE: f64 = 1e-6;

/// Diagonal-covariance Gaussian mixture for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGmm {
    pub weights: Categorical,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl ClassGmm {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        -0.5 * x
            .iter()
            .zip(&self.means[k])
            .zip(&self.variances[k])
            .map(|((xi, m), v)| (2.0 * std::f64::consts::PI * v).ln() + (xi - m).powi(2) / v)
            .sum::<f64>()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights.probs()[k].ln() + self.component_log_density(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mixture_mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|d| self.means.iter().zip(self.weights.probs()).map(|(m, w)| w * m[d]).sum())
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.weights.sample_index(rng);
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub model: ClassGmm,
    /// Total log-likelihood of the data, initial parameters first.
    pub log_likelihoods: Vec<f64>,
    /// Number of component-dimension variances raised to the floor.
    pub floored: usize,
}

fn component_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

/// EM for a diagonal GMM. Initial means are chosen by farthest-point
/// traversal from a seeded first point.
pub fn fit_class_gmm(points: &[Vec<f64>], n_components: usize, seed: u64) -> Result<GmmFit> {
    if n_components == 0 {
        return Err(Error::InvalidArgument("n_components must be >= 1".into()));
    }
    if points.len() < 2 * n_components {
        return Err(Error::InvalidArgument(format!(
            "{} points are too few for {n_components} components",
            points.len()
        )));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("points must share a positive dimension and be finite".into()));
    }
    let n = points.len() as f64;
    let global_mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let global_var: Vec<f64> = (0..dim)
        .map(|d| (points.iter().map(|p| (p[d] - global_mean[d]).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR))
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < n_components {
        let far = (0..points.len())
            .max_by(|&a, &b| {
                let dist = |i: usize| {
                    chosen
                        .iter()
                        .map(|&c| points[i].iter().zip(&points[c]).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min)
                };
                dist(a).total_cmp(&dist(b)).then(b.cmp(&a))
            })
            .expect("non-empty points");
        chosen.push(far);
    }
    let mut model = ClassGmm {
        weights: Categorical::uniform(component_labels(n_components))?,
        means: chosen.iter().map(|&i| points[i].clone()).collect(),
        variances: vec![global_var; n_components],
    };

    let e_step = |m: &ClassGmm| -> (f64, Vec<Vec<f64>>) {
        let mut ll = 0.0;
        let resp = points
            .iter()
            .map(|x| {
                let lp: Vec<f64> =
                    (0..n_components).map(|k| m.weights.probs()[k].ln() + m.component_log_density(k, x)).collect();
                let norm = log_sum_exp(&lp);
                ll += norm;
                lp.iter().map(|l| (l - norm).exp()).collect()
            })
            .collect();
        (ll, resp)
    };

    let (mut ll, mut resp) = e_step(&model);
    let mut history = vec![ll];
    let mut floored = 0;
    for _ in 0..EM_MAX_ITERATIONS {
        let nk: Vec<f64> = (0..n_components).map(|k| resp.iter().map(|r| r[k]).sum::<f64>()).collect();
        let mut means = Vec::with_capacity(n_components);
        let mut variances = Vec::with_capacity(n_components);
        floored = 0;
        for k in 0..n_components {
            if nk[k] <= f64::MIN_POSITIVE {
                // empty component: keep its previous parameters
                means.push(model.means[k].clone());
                variances.push(model.variances[k].clone());
                continue;
            }
            let mean: Vec<f64> =
                (0..dim).map(|d| points.iter().zip(&resp).map(|(p, r)| r[k] * p[d]).sum::<f64>() / nk[k]).collect();
            let var: Vec<f64> = (0..dim)
                .map(|d| {
                    let v = points.iter().zip(&resp).map(|(p, r)| r[k] * (p[d] - mean[d]).powi(2)).sum::<f64>() / nk[k];
                    if v < VARIANCE_FLOOR {
                        floored += 1;
                        VARIANCE_FLOOR
                    } else {
                        v
                    }
                })
                .collect();
            means.push(mean);
            variances.push(var);
        }
        model = ClassGmm {
            weights: Categorical::from_weights(component_labels(n_components), nk.clone())?,
            means,
            variances,
        };
        let (new_ll, new_resp) = e_step(&model);
        history.push(new_ll);
        let improvement = (new_ll - ll) / ll.abs().max(f64::MIN_POSITIVE);
        ll = new_ll;
        resp = new_resp;
        if improvement < EM_TOLERANCE {
            break;
        }
    }
    if floored > 0 {
        log::warn!("gmm: {floored} collapsed variance(s) raised to {VARIANCE_FLOOR}");
    }
    Ok(GmmFit { model, log_likelihoods: history, floored })
}

pub fn round_to(x: f64, decimals: u32) -> f64 {
    let s = 10f64.powi(decimals as i32);
    (x * s).round() / s + 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    pub class: String,
}

/// Draws `total / n_classes` points per class, rounded to `decimals`, in
/// round-robin class order. A point whose rounded key was already produced
/// by a different class is redrawn, so the feature → class table stays a
/// function. Points below `min_value` are clipped to it when given.
pub fn sample_synthetic_points(
    models: &[(String, ClassGmm)],
    total: usize,
    decimals: u32,
    min_value: Option<f64>,
    seed: u64,
) -> Result<Vec<LabeledPoint>> {
    if models.is_empty() {
        return Err(Error::Empty("class models"));
    }
    if !total.is_multiple_of(models.len()) {
        return Err(Error::InvalidArgument(format!("{total} points cannot be split evenly over {} classes", models.len())));
    }
    let per_class = total / models.len();
    let mut rng = rng_from_seed(seed);
    let mut owner: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(total);
    const MAX_REDRAWS: usize = 10_000;
    for _ in 0..per_class {
        for (c, (class, gmm)) in models.iter().enumerate() {
            let mut redraws = 0;
            loop {
                let features: Vec<f64> = gmm
                    .sample(&mut rng)
                    .into_iter()
                    .map(|v| round_to(min_value.map_or(v, |m| v.max(m)), decimals))
                    .collect();
                let key = feature_key(&features, decimals);
                match owner.get(&key) {
                    Some(&o) if o != c => {
                        redraws += 1;
                        if redraws > MAX_REDRAWS {
                            return Err(Error::Degenerate(format!("class {class} overlaps other classes at this rounding")));
                        }
                    }
                    _ => {
                        owner.insert(key, c);
                        out.push(LabeledPoint { features, class: class.clone() });
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Maps class names to `<domain>_type_<k>` in input order.
pub fn anonymize_labels(class_names: &[String], domain: &str) -> Result<BTreeMap<String, String>> {
    let mut seen = HashSet::new();
    let mut out = BTreeMap::new();
    for (i, name) in class_names.iter().enumerate() {
        if !seen.insert(name) {
            return Err(Error::InvalidArgument(format!("duplicate class name {name:?}")));
        }
        out.insert(name.clone(), format!("{domain}_type_{}", i + 1));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub schema_version: u32,
    pub question_id: String,
    pub question_text: String,
    pub features: Vec<f64>,
    pub gold_class: String,
    pub gold_answer: String,
}

/// Question templates with positional slots `{0}..{n-1}` and an optional
/// `{key}` slot for the class → answer legend. Lines starting with `#` are
/// comments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePool {
    pub templates: Vec<String>,
}

impl TemplatePool {
    pub fn parse(text: &str) -> Self {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self { templates }
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Empty("template pool"));
        }
        for t in &self.templates {
            for i in 0..n_features {
                if t.matches(&format!("{{{i}}}")).count() != 1 {
                    return Err(Error::InvalidArgument(format!("template {t:?} must contain slot {{{i}}} exactly once")));
                }
            }
            if t.contains(&format!("{{{n_features}}}")) {
                return Err(Error::InvalidArgument(format!("template {t:?} has more slots than {n_features} features")));
            }
        }
        Ok(())
    }
}

/// `Key: flower_type_1 means purple; flower_type_2 means blue.`
pub fn answer_legend(answer_map: &BTreeMap<String, String>) -> String {
    let parts: Vec<String> = answer_map.iter().map(|(c, a)| format!("{c} means {a}")).collect();
    format!("Key: {}.", parts.join("; "))
}

pub fn format_feature(v: f64, decimals: u32) -> String {
    format!("{:.*}", decimals as usize, v)
}

pub fn render_question(
    question_id: &str,
    point: &LabeledPoint,
    pool: &TemplatePool,
    answer_map: &BTreeMap<String, String>,
    decimals: u32,
    seed: u64,
) -> Result<QaItem> {
    pool.validate(point.features.len())?;
    let gold_answer = answer_map
        .get(&point.class)
        .ok_or_else(|| Error::InvalidArgument(format!("no answer for class {:?}", point.class)))?;
    let mut rng = rng_from_seed(seed);
    let template = &pool.templates[rng.random_range(0..pool.templates.len())];
    let mut text = template.replace("{key}", &answer_legend(answer_map));
    for (i, v) in point.features.iter().enumerate() {
        text = text.replace(&format!("{{{i}}}"), &format_feature(*v, decimals));
    }
    Ok(QaItem {
        schema_version: SCHEMA_VERSION,
        question_id: question_id.into(),
        question_text: text.split_whitespace().collect::<Vec<_>>().join(" "),
        features: point.features.clone(),
        gold_class: point.class.clone(),
        gold_answer: gold_answer.clone(),
    })
}

/// Rewrites each question with the generator's paraphrase stage, keeping
/// the original when the paraphrase drops any feature value.
pub fn paraphrase_questions(items: &mut [QaItem], generator: &dyn Generator, decimals: u32, seed: u64) -> Result<()> {
    for (i, item) in items.iter_mut().enumerate() {
        let req = GeneratorRequest::new(Stage::Paraphrase, item.question_text.clone(), 1)
            .with_seed(derive_seed(seed, "paraphrase", i as u64));
        let Some(candidate) = generator.generate(&req)?.into_iter().next() else { continue };
        let text = candidate.text.trim();
        if !text.is_empty() && item.features.iter().all(|v| text.contains(&format_feature(*v, decimals))) {
            item.question_text = text.to_string();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Iris,
    Diabetes,
}

struct ClassSummary {
    name: &'static str,
    mean: &'static [f64],
    std: &'static [f64],
    answer: &'static str,
}

/// Domain description for each synthetic dataset.
pub struct DatasetProfile {
    pub domain: &'static str,
    pub feature_names: &'static [&'static str],
    pub render_template: &'static str,
    pub templates: &'static str,
    pub min_value: Option<f64>,
    classes: &'static [ClassSummary],
}

const IRIS: DatasetProfile = DatasetProfile {
    domain: "flower",
    feature_names: &["sepal_length", "sepal_width", "petal_length", "petal_width"],
    render_template: "The flower is {}",
    templates: include_str!("../templates/iris_questions.txt"),
    min_value: Some(0.1),
    classes: &[
        ClassSummary { name: "Iris-setosa", mean: &[5.006, 3.428, 1.462, 0.246], std: &[0.352, 0.379, 0.174, 0.105], answer: "purple" },
        ClassSummary { name: "Iris-versicolor", mean: &[5.936, 2.770, 4.260, 1.326], std: &[0.516, 0.314, 0.470, 0.198], answer: "blue" },
        ClassSummary { name: "Iris-virginica", mean: &[6.588, 2.974, 5.552, 2.026], std: &[0.636, 0.322, 0.552, 0.275], answer: "white" },
    ],
};

const DIABETES: DatasetProfile = DatasetProfile {
    domain: "patient",
    feature_names: &["pregnancies", "glucose", "blood_pressure", "skin_thickness", "insulin", "bmi", "pedigree", "age"],
    render_template: "The patient is diagnosed with {}",
    templates: include_str!("../templates/diabetes_questions.txt"),
    min_value: Some(0.0),
    classes: &[
        ClassSummary {
            name: "tested_negative",
            mean: &[3.30, 109.98, 68.18, 19.66, 68.79, 30.30, 0.43, 31.19],
            std: &[3.02, 26.14, 18.06, 14.89, 98.87, 7.69, 0.30, 11.67],
            answer: "no",
        },
        ClassSummary {
            name: "tested_positive",
            mean: &[4.87, 141.26, 70.82, 22.16, 100.34, 35.14, 0.55, 37.07],
            std: &[3.74, 31.94, 21.49, 17.68, 138.69, 7.26, 0.37, 10.97],
            answer: "yes",
        },
    ],
};

impl DatasetKind {
    pub fn profile(self) -> &'static DatasetProfile {
        match self {
            DatasetKind::Iris => &IRIS,
            DatasetKind::Diabetes => &DIABETES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Iris => "iris",
            DatasetKind::Diabetes => "diabetes",
        }
    }
}

/// Seeded stand-in for the real source table: independent normal draws
/// from per-class summary statistics, `per_class` rows each.
pub fn standin_source(kind: DatasetKind, per_class: usize, seed: u64) -> Vec<(Vec<f64>, String)> {
    let profile = kind.profile();
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::with_capacity(per_class * profile.classes.len());
    for class in profile.classes {
        for _ in 0..per_class {
            let x = class
                .mean
                .iter()
                .zip(class.std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = m + s * z;
                    profile.min_value.map_or(v, |lo| v.max(lo))
                })
                .collect();
            rows.push((x, class.name.to_string()));
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaGenConfig {
    pub kind: DatasetKind,
    /// Delimited table (features…, class); the bundled stand-in otherwise.
    pub source_path: Option<String>,
    /// Replacement template file; the bundled pool otherwise.
    pub templates_path: Option<String>,
    pub n_questions: usize,
    pub n_components: usize,
    pub decimals: u32,
    pub seed: u64,
}

impl Default for QaGenConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Iris,
            source_path: None,
            templates_path: None,
            n_questions: 150,
            n_components: 1,
            decimals: 1,
            seed: 0,
        }
    }
}

/// A generated tool-calling QA dataset plus what is needed to build its
/// lookup tool and answer map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaDataset {
    pub schema_version: u32,
    pub name: String,
    pub domain: String,
    pub feature_names: Vec<String>,
    pub classes: Vec<String>,
    /// Anonymized class → short answer.
    pub answer_map: BTreeMap<String, String>,
    pub render_template: String,
    pub decimals: u32,
    #[serde(skip)]
    pub items: Vec<QaItem>,
}

impl QaDataset {
    /// Rows for the lookup classifier: every question's features and class.
    pub fn table_rows(&self) -> Vec<(Vec<f64>, String)> {
        self.items.iter().map(|q| (q.features.clone(), q.gold_class.clone())).collect()
    }

    /// Writes `dataset.json` (metadata) and `questions.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(self)? + "\n")?;
        write_jsonl(dir.join("questions.jsonl"), &self.items)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = fs::read_to_string(dir.join("dataset.json"))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join("dataset.json").display())))?;
        let mut ds: QaDataset = serde_json::from_str(&meta).map_err(|e| Error::Config(format!("dataset.json: {e}")))?;
        ds.items = read_jsonl(dir.join("questions.jsonl"))?;
        if let Some(bad) = ds.items.iter().find(|q| q.schema_version != SCHEMA_VERSION) {
            return Err(Error::Config(format!("question {} has schema version {}", bad.question_id, bad.schema_version)));
        }
        Ok(ds)
    }
}

pub fn generate_qa_dataset(cfg: &QaGenConfig) -> Result<QaDataset> {
    let profile = cfg.kind.profile();
    let source = match &cfg.source_path {
        Some(p) => LookupClassifierTool::read_table(p)?,
        None => standin_source(cfg.kind, 50, derive_seed(cfg.seed, "datagen-source", 0)),
    };
    let mut class_names: Vec<String> = Vec::new();
    for (x, c) in &source {
        if x.len() != profile.feature_names.len() {
            return Err(Error::Config(format!("source row has {} features, expected {}", x.len(), profile.feature_names.len())));
        }
        if !class_names.contains(c) {
            class_names.push(c.clone());
        }
    }
    let anon = anonymize_labels(&class_names, profile.domain)?;
    let mut answer_map = BTreeMap::new();
    for (k, name) in class_names.iter().enumerate() {
        let answer = profile
            .classes
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.answer.to_string())
            .unwrap_or_else(|| format!("answer_{}", k + 1));
        answer_map.insert(anon[name].clone(), answer);
    }
    let mut models = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let pts: Vec<Vec<f64>> = source.iter().filter(|(_, c)| c == name).map(|(x, _)| x.clone()).collect();
        let fit = fit_class_gmm(&pts, cfg.n_components, derive_seed(cfg.seed, "datagen-gmm", k as u64))?;
        models.push((anon[name].clone(), fit.model));
    }
    let mut points =
        sample_synthetic_points(&models, cfg.n_questions, cfg.decimals, profile.min_value, derive_seed(cfg.seed, "datagen", 0))?;
    points.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "datagen-order", 0)));
    let pool = match &cfg.templates_path {
        Some(p) => TemplatePool::parse(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{p}: {e}")))?),
        None => TemplatePool::parse(profile.templates),
    };
    pool.validate(profile.feature_names.len())?;
    let items = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let qid = format!("{}-{i:03}", cfg.kind.name());
            render_question(&qid, p, &pool, &answer_map, cfg.decimals, derive_seed(cfg.seed, "datagen-template", i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QaDataset {
        schema_version: SCHEMA_VERSION,
        name: cfg.kind.name().into(),
        domain: profile.domain.into(),
        feature_names: profile.feature_names.iter().map(|s| s.to_string()).collect(),
        classes: class_names.iter().map(|n| anon[n].clone()).collect(),
        answer_map,
        render_template: profile.render_template.into(),
        decimals: cfg.decimals,
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagSource {
    pub question_id: String,
    pub question_text: String,
    pub gold_answer: String,
    pub gold_passage: Document,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagQaItem {
    pub schema_version: u32,
    pub question_id: String,
    pub question_text: String,
    pub gold_answer: String,
    /// Absent when the gold passage was withheld from the corpus.
    pub gold_passage_id: Option<String>,
}

/// Keeps the gold passage for `⌊gold_fraction·N⌋` seeded-chosen questions,
/// withholds the rest, and shuffles golds and distractors into one corpus.
pub fn build_rag_corpus(
    questions: &[RagSource],
    distractors: Vec<Document>,
    gold_fraction: f64,
    seed: u64,
) -> Result<(Vec<Document>, Vec<RagQaItem>)> {
    if !(0.0..=1.0).contains(&gold_fraction) {
        return Err(Error::InvalidArgument(format!("gold_fraction {gold_fraction} outside [0, 1]")));
    }
    let n_keep = (gold_fraction * questions.len() as f64).floor() as usize;
    let withheld = questions.len() - n_keep;
    if distractors.len() < withheld.max(1) {
        return Err(Error::InvalidArgument(format!(
            "{} distractor passages are too few; need at least {}",
            distractors.len(),
            withheld.max(1)
        )));
    }
    let mut ids: HashSet<&str> = HashSet::new();
    for d in questions.iter().map(|q| &q.gold_passage).chain(&distractors) {
        if !ids.insert(&d.doc_id) {
            return Err(Error::InvalidArgument(format!("duplicate passage id {:?}", d.doc_id)));
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..questions.len()).collect();
    order.shuffle(&mut rng);
    let keep: HashSet<usize> = order.into_iter().take(n_keep).collect();
    let mut corpus = distractors;
    let items = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let kept = keep.contains(&i);
            if kept {
                corpus.push(q.gold_passage.clone());
            }
            RagQaItem {
                schema_version: SCHEMA_VERSION,
                question_id: q.question_id.clone(),
                question_text: q.question_text.clone(),
                gold_answer: q.gold_answer.clone(),
                gold_passage_id: kept.then(|| q.gold_passage.doc_id.clone()),
            }
        })
        .collect();
    corpus.shuffle(&mut rng);
    Ok((corpus, items))
}

const SYLLABLES: &[&str] = &[
    "ka", "vel", "mor", "tri", "san", "lo", "quen", "dar", "ith", "bra", "zul", "en", "ost", "fa", "ri", "gon", "mel",
    "tas", "yor", "phi",
];
const PLACES: &[&str] = &["river", "town", "mountain", "lake", "island", "valley"];
const FACTS: &[(&str, &str)] = &[
    ("was founded in the year {n}", "Was {e} founded in the year {n}?"),
    ("has a population of {n} people", "Does {e} have a population of {n} people?"),
    ("lies {n} kilometres from the coast", "Does {e} lie {n} kilometres from the coast?"),
    ("hosts a festival every {n} years", "Does {e} host a festival every {n} years?"),
];

fn invented_name<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(2..4);
    let mut s: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
    s[..1].make_ascii_uppercase();
    s
}

/// Fabricated-entity yes/no questions with one gold passage each, plus
/// distractor passages about other fabricated entities. Every passage is a
/// single line.
pub fn rag_standin(n_questions: usize, n_distractors: usize, seed: u64) -> (Vec<RagSource>, Vec<Document>) {
    let mut rng = rng_from_seed(seed);
    let mut used = HashSet::new();
    let mut fresh_entity = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let e = format!("the {} of {}", PLACES[rng.random_range(0..PLACES.len())], invented_name(rng));
        if used.insert(e.clone()) {
            return e;
        }
    };
    let capitalize = |s: &str| {
        let mut s = s.to_string();
        s[..1].make_ascii_uppercase();
        s
    };
    let mut sources = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let entity = fresh_entity(&mut rng);
        let (fact, question) = FACTS[rng.random_range(0..FACTS.len())];
        let n: u32 = rng.random_range(12..1900);
        let yes = i % 2 == 0;
        let asked = if yes { n } else { n + rng.random_range(1..50) };
        sources.push(RagSource {
            question_id: format!("rag-{i:03}"),
            question_text: question.replace("{e}", &entity).replace("{n}", &asked.to_string()),
            gold_answer: if yes { "yes" } else { "no" }.into(),
            gold_passage: Document {
                doc_id: format!("gold-{i:03}"),
                text: format!("{} {}.", capitalize(&entity), fact.replace("{n}", &n.to_string())),
                embedding: None,
            },
        });
    }
    let distractors = (0..n_distractors)
        .map(|i| {
            let entity = fresh_entity(&mut rng);
            let (fact, _) = FACTS[rng.random_range(0..FACTS.len())];
            let n: u32 = rng.random_range(12..1900);
            Document {
                doc_id: format!("doc-{i:04}"),
                text: format!("{} {}.", capitalize(&entity), fact.replace("{n}", &n.to_string())),
                embedding: None,
            }
        })
        .collect();
    (sources, distractors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagGenConfig {
    /// Questions JSONL of [`RagSource`]; the bundled stand-in otherwise.
    pub questions_path: Option<String>,
    /// Passage JSONL of distractor documents; the bundled stand-in otherwise.
    pub passages_path: Option<String>,
    pub n_questions: usize,
    pub n_distractors: usize,
    pub gold_fraction: f64,
    pub seed: u64,
}

impl Default for RagGenConfig {
    fn default() -> Self {
        Self { questions_path: None, passages_path: None, n_questions: 150, n_distractors: 300, gold_fraction: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagDataset {
    pub schema_version: u32,
    pub name: String,
    #[serde(skip)]
    pub corpus: Vec<Document>,
    #[serde(skip)]
    pub items: Vec<RagQaItem>,
}

impl RagDataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(self)? + "\n")?;
        write_jsonl(dir.join("corpus.jsonl"), &self.corpus)?;
        write_jsonl(dir.join("questions.jsonl"), &self.items)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = fs::read_to_string(dir.join("dataset.json"))
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join("dataset.json").display())))?;
        let mut ds: RagDataset = serde_json::from_str(&meta).map_err(|e| Error::Config(format!("dataset.json: {e}")))?;
        ds.corpus = read_jsonl(dir.join("corpus.jsonl"))?;
        ds.items = read_jsonl(dir.join("questions.jsonl"))?;
        let ids: HashSet<&str> = ds.corpus.iter().map(|d| d.doc_id.as_str()).collect();
        if let Some(bad) = ds.items.iter().find(|q| q.gold_passage_id.as_deref().is_some_and(|g| !ids.contains(g))) {
            return Err(Error::Config(format!("question {} names a passage missing from the corpus", bad.question_id)));
        }
        Ok(ds)
    }
}

pub fn generate_rag_dataset(cfg: &RagGenConfig) -> Result<RagDataset> {
    let (standin_q, standin_d) = rag_standin(cfg.n_questions, cfg.n_distractors, derive_seed(cfg.seed, "datagen-rag", 0));
    let questions = match &cfg.questions_path {
        Some(p) => read_jsonl(p)?,
        None => standin_q,
    };
    let distractors = match &cfg.passages_path {
        Some(p) => read_jsonl(p)?,
        None => standin_d,
    };
    let (corpus, items) = build_rag_corpus(&questions, distractors, cfg.gold_fraction, derive_seed(cfg.seed, "datagen", 1))?;
    Ok(RagDataset { schema_version: SCHEMA_VERSION, name: "rag".into(), corpus, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_tool_call;
    use crate::pipeline::format_call;
    use crate::tools::ClassifierSettings;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn blob(center: &[f64], n: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + spread * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_component_is_closed_form() {
        let pts = blob(&[1.0, -2.0, 5.0], 60, 0.7, 1);
        let fit = fit_class_gmm(&pts, 1, 3).unwrap();
        for d in 0..3 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / 60.0;
            let var = pts.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / 60.0;
            assert_abs_diff_eq!(fit.model.means[0][d], mean, epsilon = 1e-9);
            assert_abs_diff_eq!(fit.model.variances[0][d], var, epsilon = 1e-9);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut pts = blob(&[0.0, 0.0], 200, 0.5, 2);
        pts.extend(blob(&[10.0, 10.0], 200, 0.5, 3));
        let fit = fit_class_gmm(&pts, 2, 4).unwrap();
        let mut means = fit.model.means.clone();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (m, c) in means.iter().zip([[0.0, 0.0], [10.0, 10.0]]) {
            assert!((m[0] - c[0]).abs() < 0.1 && (m[1] - c[1]).abs() < 0.1, "{m:?}");
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        for seed in 0..20 {
            let mut pts = blob(&[0.0, 1.0], 40, 1.0, seed);
            pts.extend(blob(&[2.0, -1.0], 40, 0.6, seed + 100));
            let fit = fit_class_gmm(&pts, 3, seed).unwrap();
            let ll = &fit.log_likelihoods;
            for w in ll.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "seed {seed}: {ll:?}");
            }
            assert!(ll.len() <= EM_MAX_ITERATIONS + 1);
            assert!(ll.last().unwrap() >= &ll[0]);
        }
    }

    #[test]
    fn gmm_errors_and_floor() {
        assert!(fit_class_gmm(&[vec![1.0], vec![2.0], vec![3.0]], 2, 0).is_err());
        assert!(fit_class_gmm(&[vec![1.0], vec![2.0, 3.0]], 1, 0).is_err());
        let fit = fit_class_gmm(&[vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 4.0]], 1, 0).unwrap();
        assert_eq!(fit.model.variances[0][0], VARIANCE_FLOOR);
        assert_eq!(fit.floored, 1);
    }

    fn iris_models() -> Vec<(String, ClassGmm)> {
        let source = standin_source(DatasetKind::Iris, 50, 7);
        ["Iris-setosa", "Iris-versicolor", "Iris-virginica"]
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let pts: Vec<Vec<f64>> = source.iter().filter(|(_, c)| c == name).map(|(x, _)| x.clone()).collect();
                (format!("flower_type_{}", k + 1), fit_class_gmm(&pts, 1, k as u64).unwrap().model)
            })
            .collect()
    }

    #[test]
    fn synthetic_points_split_evenly_and_round() {
        let pts = sample_synthetic_points(&iris_models(), 150, 1, Some(0.1), 9).unwrap();
        for k in 1..=3 {
            assert_eq!(pts.iter().filter(|p| p.class == format!("flower_type_{k}")).count(), 50);
        }
        for p in &pts {
            for v in &p.features {
                assert_abs_diff_eq!(v * 10.0, (v * 10.0).round(), epsilon = 1e-9);
            }
        }
        assert!(sample_synthetic_points(&iris_models(), 151, 1, None, 9).is_err());
        assert_eq!(pts, sample_synthetic_points(&iris_models(), 150, 1, Some(0.1), 9).unwrap());
    }

    #[test]
    fn synthetic_moments_match_mixture() {
        let mut a = blob(&[0.0, 5.0], 50, 1.0, 1);
        a.extend(blob(&[4.0, 5.0], 50, 1.0, 2));
        let gmm = fit_class_gmm(&a, 2, 0).unwrap().model;
        let models = vec![("c".to_string(), gmm.clone())];
        let pts = sample_synthetic_points(&models, 10_000, 6, None, 3).unwrap();
        let target = gmm.mixture_mean();
        for d in 0..2 {
            let m = pts.iter().map(|p| p.features[d]).sum::<f64>() / 10_000.0;
            assert!((m - target[d]).abs() < 0.05, "{m} vs {}", target[d]);
        }
    }

    #[test]
    fn anonymization() {
        let names = vec!["Iris-setosa".to_string(), "Iris-versicolor".to_string()];
        let m = anonymize_labels(&names, "flower").unwrap();
        assert_eq!(m["Iris-setosa"], "flower_type_1");
        assert_eq!(m["Iris-versicolor"], "flower_type_2");
        assert_eq!(anonymize_labels(&["x".to_string()], "patient").unwrap()["x"], "patient_type_1");
        assert!(anonymize_labels(&["x".to_string(), "x".to_string()], "d").is_err());
    }

    fn pool() -> TemplatePool {
        TemplatePool::parse(IRIS.templates)
    }

    #[test]
    fn rendered_question_contains_every_feature() {
        let p = LabeledPoint { features: vec![5.1, 3.5, 1.4, 0.2], class: "flower_type_1".into() };
        let mut map = BTreeMap::new();
        map.insert("flower_type_1".to_string(), "type one".to_string());
        for seed in 0..20 {
            let q = render_question("q", &p, &pool(), &map, 1, seed).unwrap();
            for v in ["5.1", "3.5", "1.4", "0.2"] {
                assert!(q.question_text.contains(v), "{}", q.question_text);
            }
            assert_eq!(q.gold_answer, "type one");
            assert!(q.question_text.contains("flower_type_1 means type one"));
            assert_eq!(q, render_question("q", &p, &pool(), &map, 1, seed).unwrap());
        }
        let short = LabeledPoint { features: vec![1.0, 2.0, 3.0, 4.0, 5.0], class: "flower_type_1".into() };
        assert!(render_question("q", &short, &pool(), &map, 1, 0).is_err());
        assert!(pool().templates.len() >= 5);
        assert!(TemplatePool::parse(DIABETES.templates).templates.len() >= 5);
    }

    #[test]
    fn generated_dataset_is_solvable_and_reproducible() {
        for kind in [DatasetKind::Iris, DatasetKind::Diabetes] {
            let cfg = QaGenConfig { kind, seed: 5, ..Default::default() };
            let ds = generate_qa_dataset(&cfg).unwrap();
            assert_eq!(ds.items.len(), 150);
            assert_eq!(ds, generate_qa_dataset(&cfg).unwrap());
            let ids: Vec<String> = ds.items.iter().map(|q| q.question_id.clone()).collect();
            let settings = ClassifierSettings { peak_prob: 1.0, noisy_fraction: 0.0, ..Default::default() };
            let tool = LookupClassifierTool::new(&ds.table_rows(), ds.classes.clone(), &ids, &settings).unwrap();
            for q in &ds.items {
                let dist = tool.classifier_distribution(&parse_tool_call(&format_call(&q.features), 0.0), &q.question_id).unwrap();
                let (label, _) = dist.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
                assert_eq!(ds.answer_map[label], q.gold_answer);
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_qa_dataset(&QaGenConfig { n_questions: 30, ..Default::default() }).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(QaDataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn rag_corpus_gold_fraction() {
        let (qs, ds) = rag_standin(150, 300, 1);
        let (corpus, items) = build_rag_corpus(&qs, ds.clone(), 0.5, 2).unwrap();
        assert_eq!(items.iter().filter(|q| q.gold_passage_id.is_some()).count(), 75);
        let ids: HashSet<&str> = corpus.iter().map(|d| d.doc_id.as_str()).collect();
        for (q, src) in items.iter().zip(&qs) {
            match &q.gold_passage_id {
                Some(g) => assert!(ids.contains(g.as_str())),
                None => assert!(!ids.contains(src.gold_passage.doc_id.as_str())),
            }
        }
        let (_, all) = build_rag_corpus(&qs, ds.clone(), 1.0, 2).unwrap();
        assert!(all.iter().all(|q| q.gold_passage_id.is_some()));
        assert!(build_rag_corpus(&qs, ds[..10].to_vec(), 0.5, 2).is_err());
        assert!(corpus.iter().all(|d| !d.text.contains('\n')));
    }

    #[test]
    fn rag_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_rag_dataset(&RagGenConfig { n_questions: 20, n_distractors: 30, ..Default::default() }).unwrap();
        ds.save(dir.path()).unwrap();
        let back = RagDataset::load(dir.path()).unwrap();
        assert_eq!(back.corpus, ds.corpus);
        assert_eq!(back.items, ds.items);
    }

    proptest! {
        #[test]
        fn anonymization_is_injective(names in prop::collection::hash_set("[a-z]{1,6}", 1..20)) {
            let names: Vec<String> = names.into_iter().collect();
            let m = anonymize_labels(&names, "d").unwrap();
            let values: HashSet<&String> = m.values().collect();
            prop_assert_eq!(values.len(), names.len());
        }
    }
}
