//! Experiment protocol: episodes for every question and run, answer
//! clustering, posterior fitting on the train split, per-question metrics,
//! grading, and AUROC per metric over the eval split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, derive_seed, RunManifest};
use crate::datagen::{
    generate_qa_dataset, generate_rag_dataset, DatasetKind, QaDataset, QaGenConfig, RagDataset, RagGenConfig,
};
use crate::error::{Error, Result};
use crate::generators::{
    sequence_logprob, Generator, GeneratorRequest, HttpGenerator, HttpGeneratorConfig, MockBehavior, MockGenerator,
    Stage,
};
use crate::io::{read_jsonl, write_jsonl};
use crate::metrics::{EntropyTerms, MetricKind, Mode, UncertaintyReport};
use crate::pipeline::{
    format_call, render_tool_output, run_episode, EpisodeConfig, EpisodeRecord, FewShotExample,
    ParseFailurePolicy, Prompt, PromptTemplates,
};
use crate::posteriors::{
    a_input, mean_entropy_a, mean_entropy_z, train_a_posterior, train_z_posterior, z_input, APosterior, ATrainingSet,
    EmbeddingProvider, HashEmbedder, HttpEmbedder, HttpEmbedderConfig, TrainingConfig, ZPosterior, ZTrainingSet,
};
use crate::prob::{mc_predictive_entropy, mc_semantic_entropy, Categorical, ScoredSample};
use crate::semantics::{cluster, normalize_text, EquivalenceOracle, ExactMatch, NliOracle, NormalizedMatch};
use crate::tools::{sample_documents, ClassifierSettings, LookupClassifierTool, LookupMissPolicy, RetrievalTool};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const RETRIEVE_CALL: &str = "[retrieve]";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub kind: GeneratorKind,
    pub faithfulness: f64,
    pub call_noise: f64,
    pub in_context_prior: bool,
    pub temperature: f64,
    pub max_tokens: usize,
    pub http: HttpGeneratorConfig,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Mock,
            faithfulness: 0.95,
            call_noise: 0.05,
            in_context_prior: true,
            temperature: 1.0,
            max_tokens: 32,
            http: HttpGeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolSettings {
    pub noisy_fraction: f64,
    pub peak_prob: f64,
    pub key_rounding: u32,
    pub miss_policy: LookupMissPolicy,
    pub top_k: usize,
    pub n_draws: usize,
    pub retrieval_temperature: f64,
}

impl Default for ToolSettings {
    fn default() -> Self {
        Self {
            noisy_fraction: 0.5,
            peak_prob: 0.9,
            key_rounding: 1,
            miss_policy: LookupMissPolicy::UniformFallback,
            top_k: 5,
            n_draws: 1,
            retrieval_temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Exact,
    #[default]
    Normalized,
    Nli,
}

/// How `H(a|x)` is estimated: a Gaussian fit sharing units with
/// `H(a|x,y)` (consistent), or the sequence entropy of sampled calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    #[default]
    Consistent,
    Mixed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self { kind: EmbeddingKind::Hash, dim: 32, endpoint: None, model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub length_normalized: bool,
    pub semantic_oracle: OracleKind,
    pub nli_endpoint: Option<String>,
    pub nli_timeout_secs: u64,
    pub posterior_mode: PosteriorMode,
    pub n_call_samples: usize,
    pub embedding: EmbeddingSettings,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            length_normalized: false,
            semantic_oracle: OracleKind::Normalized,
            nli_endpoint: None,
            nli_timeout_secs: 30,
            posterior_mode: PosteriorMode::Consistent,
            n_call_samples: 10,
            embedding: EmbeddingSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Directory written by `gen-data`; generated in memory when absent.
    pub path: Option<String>,
    pub kind: DatasetKind,
    pub n_questions: usize,
    pub n_components: usize,
    pub decimals: u32,
    pub n_distractors: usize,
    pub gold_fraction: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            path: None,
            kind: DatasetKind::Iris,
            n_questions: 150,
            n_components: 1,
            decimals: 1,
            n_distractors: 300,
            gold_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub n_answer_samples: usize,
    pub n_runs: usize,
    /// The first `train_size` questions train the posteriors.
    pub train_size: usize,
    /// The next `eval_size` questions are scored.
    pub eval_size: usize,
    pub few_shot_k: usize,
    pub workers: usize,
    pub parse_retries: usize,
    pub dataset: DatasetSettings,
    pub generator: GeneratorSettings,
    pub tool: ToolSettings,
    pub estimators: EstimatorSettings,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Tool,
            n_answer_samples: 10,
            n_runs: 3,
            train_size: 30,
            eval_size: 120,
            few_shot_k: 3,
            workers: 4,
            parse_retries: 0,
            dataset: DatasetSettings::default(),
            generator: GeneratorSettings::default(),
            tool: ToolSettings::default(),
            estimators: EstimatorSettings::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_answer_samples == 0 {
            return bad("n_answer_samples must be >= 1");
        }
        if self.n_runs == 0 {
            return bad("n_runs must be >= 1");
        }
        if self.eval_size == 0 {
            return bad("eval_size must be >= 1");
        }
        if self.mode == Mode::Tool && self.train_size == 0 {
            return bad("tool mode needs a non-empty train split for the posterior models");
        }
        if self.dataset.path.is_none() && self.train_size + self.eval_size > self.dataset.n_questions {
            return bad("train_size + eval_size exceeds the number of questions");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.estimators.posterior_mode == PosteriorMode::Mixed && self.estimators.n_call_samples == 0 {
            return bad("mixed posterior mode needs n_call_samples >= 1");
        }
        if self.estimators.semantic_oracle == OracleKind::Nli && self.estimators.nli_endpoint.is_none() {
            return bad("the nli oracle needs estimators.nli_endpoint");
        }
        if self.estimators.embedding.kind == EmbeddingKind::Http && self.estimators.embedding.endpoint.is_none() {
            return bad("http embeddings need estimators.embedding.endpoint");
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Exact,
    /// The normalized gold is one token contained in the normalized answer.
    Containment,
    Incorrect,
}

impl Grade {
    pub fn is_correct(self) -> bool {
        self != Grade::Incorrect
    }
}

pub const GRADING_RULE: &str = "normalized match (lowercase, punctuation and articles removed, whitespace collapsed); \
a single-token gold contained in the answer also counts";

/// Lowercase, punctuation to spaces, articles removed, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    normalize_text(s).split(' ').filter(|t| !matches!(*t, "a" | "an" | "the" | "")).collect::<Vec<_>>().join(" ")
}

pub fn grade(answer: &str, gold: &str) -> Grade {
    let (a, g) = (normalize_answer(answer), normalize_answer(gold));
    if a == g {
        return Grade::Exact;
    }
    if !g.is_empty() && !g.contains(' ') && a.split(' ').any(|t| t == g) {
        return Grade::Containment;
    }
    Grade::Incorrect
}

pub fn grade_answer(answer: &str, gold: &str) -> bool {
    grade(answer, gold).is_correct()
}

/// Most frequent answer by normalized form; ties go to the highest
/// sequence log-probability, then to the lexicographically smaller form.
pub fn modal_answer<'a>(samples: impl IntoIterator<Item = &'a ScoredSample>) -> Option<String> {
    let mut groups: BTreeMap<String, (usize, f64, &'a str)> = BTreeMap::new();
    for s in samples {
        let g = groups.entry(normalize_answer(&s.text)).or_insert((0, f64::NEG_INFINITY, &s.text));
        g.0 += 1;
        if s.log_prob > g.1 {
            g.1 = s.log_prob;
            g.2 = &s.text;
        }
    }
    groups
        .into_iter()
        .max_by(|(ka, a), (kb, b)| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(kb.cmp(ka)))
        .map(|(_, (_, _, text))| text.to_string())
}

/// Probability that a random (incorrect, correct) pair has the incorrect
/// item more uncertain; ties count one half. Uses mid-ranks.
pub fn auroc(uncertainties: &[f64], correct: &[bool]) -> Result<f64> {
    if uncertainties.len() != correct.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            uncertainties.len(),
            correct.len()
        )));
    }
    if uncertainties.iter().any(|u| u.is_nan()) {
        return Err(Error::InvalidArgument("uncertainty scores contain NaN".into()));
    }
    let n_correct = correct.iter().filter(|c| **c).count();
    let n_wrong = correct.len() - n_correct;
    if n_wrong == 0 {
        return Err(Error::UndefinedAuroc("correct"));
    }
    if n_correct == 0 {
        return Err(Error::UndefinedAuroc("incorrect"));
    }
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let mut ranks = vec![0.0; order.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && uncertainties[order[j + 1]] == uncertainties[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let wrong_rank_sum: f64 = ranks.iter().zip(correct).filter(|(_, c)| !**c).map(|(r, _)| r).sum();
    let (nw, nc) = (n_wrong as f64, n_correct as f64);
    Ok((wrong_rank_sum - nw * (nw + 1.0) / 2.0) / (nw * nc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub generator: String,
    pub metric: MetricKind,
    /// `None` when every eval question was graded the same way.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub report: UncertaintyReport,
    pub gold_answer: String,
    pub modal_answer: String,
    pub grade: Grade,
    pub correct: bool,
    pub runs_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub config_hash: String,
    pub mode: Mode,
    pub generator: String,
    pub seeds: BTreeMap<String, u64>,
    pub rows: Vec<AurocRow>,
    pub failed_episodes: usize,
    pub excluded_questions: usize,
    pub metadata: BTreeMap<String, String>,
    #[serde(skip)]
    pub questions: Vec<QuestionResult>,
}

/// AUROC rows for every metric of `mode`, computed over `questions`.
pub fn auroc_rows(questions: &[QuestionResult], mode: Mode, generator: &str) -> Result<Vec<AurocRow>> {
    let correct: Vec<bool> = questions.iter().map(|q| q.correct).collect();
    MetricKind::for_mode(mode)
        .into_iter()
        .map(|metric| {
            let vals: Option<Vec<f64>> = questions.iter().map(|q| q.report.value(metric)).collect();
            let auroc = match vals {
                None => None,
                Some(v) => match auroc(&v, &correct) {
                    Ok(a) => Some(a),
                    Err(Error::UndefinedAuroc(_)) => None,
                    Err(e) => return Err(e),
                },
            };
            Ok(AurocRow { generator: generator.to_string(), metric, auroc })
        })
        .collect()
}

impl ResultTable {
    pub fn auroc(&self, metric: MetricKind) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).and_then(|r| r.auroc)
    }

    /// Errors when the eval split was graded all-correct or all-incorrect.
    pub fn ensure_defined(&self) -> Result<()> {
        if self.rows.iter().all(|r| r.auroc.is_none()) {
            let all_correct = self.questions.iter().all(|q| q.correct);
            return Err(Error::UndefinedAuroc(if all_correct { "correct" } else { "incorrect" }));
        }
        Ok(())
    }

    pub fn metrics(&self) -> Vec<MetricKind> {
        self.rows.iter().map(|r| r.metric).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
    Text,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Jsonl => "jsonl",
            ReportFormat::Text => "txt",
        }
    }
}

fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn render_text_table(table: &ResultTable) -> String {
    let metrics = table.metrics();
    let name_w = table.generator.len().max("generator".len());
    let mut out = String::new();
    let _ = writeln!(out, "config_hash: {}", table.config_hash);
    let _ = write!(out, "{:<name_w$}", "generator");
    for m in &metrics {
        let _ = write!(out, "  {:>w$}", m.column_name(), w = m.column_name().len().max(5));
    }
    out.push('\n');
    let _ = write!(out, "{:<name_w$}", table.generator);
    for m in &metrics {
        let cell = table.auroc(*m).map_or_else(|| "n/a".to_string(), |a| format!("{a:.3}"));
        let _ = write!(out, "  {:>w$}", cell, w = m.column_name().len().max(5));
    }
    out.push('\n');
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Table(ResultTable),
    Question(Box<QuestionResult>),
}

pub fn emit_report(table: &ResultTable, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Text => fs::write(path, render_text_table(table))?,
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            let mut header = vec!["generator".to_string()];
            header.extend(table.metrics().iter().map(|m| m.column_name().to_string()));
            header.push("config_hash".into());
            w.write_record(&header)?;
            let mut row = vec![table.generator.clone()];
            row.extend(table.rows.iter().map(|r| csv_value(r.auroc)));
            row.push(table.config_hash.clone());
            w.write_record(&row)?;
            w.flush()?;
        }
        ReportFormat::Jsonl => {
            let lines = std::iter::once(ReportLine::Table(table.clone()))
                .chain(table.questions.iter().map(|q| ReportLine::Question(Box::new(q.clone()))));
            write_jsonl(path, lines)?;
        }
    }
    Ok(())
}

/// Reads a JSONL report back into the table it came from.
pub fn read_report(path: impl AsRef<Path>) -> Result<ResultTable> {
    let path = path.as_ref();
    let mut table = None;
    let mut questions = Vec::new();
    for line in read_jsonl::<ReportLine>(path)? {
        match line {
            ReportLine::Table(t) if table.is_none() => table = Some(t),
            ReportLine::Table(_) => return Err(Error::Config(format!("{}: more than one table header", path.display()))),
            ReportLine::Question(q) => questions.push(*q),
        }
    }
    let mut table = table.ok_or_else(|| Error::Config(format!("{}: no table header line", path.display())))?;
    table.questions = questions;
    Ok(table)
}

/// Reads the AUROC rows of a CSV report.
pub fn read_csv_rows(path: impl AsRef<Path>) -> Result<Vec<AurocRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let generator = rec.get(0).unwrap_or_default().to_string();
        for (name, cell) in headers.iter().zip(rec.iter()).skip(1) {
            let Some(metric) = MetricKind::from_column_name(name) else { continue };
            let auroc = match cell {
                "NA" => None,
                v => Some(v.parse::<f64>().map_err(|e| Error::Config(format!("bad AUROC cell {v:?}: {e}")))?),
            };
            rows.push(AurocRow { generator: generator.clone(), metric, auroc });
        }
    }
    Ok(rows)
}

struct CachedEmbedder {
    inner: Box<dyn EmbeddingProvider>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl EmbeddingProvider for CachedEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).insert(text.to_string(), v.clone());
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolQuestion {
    pub question_id: String,
    pub text: String,
    pub gold_answer: String,
    pub split: Split,
}

enum ToolBackend {
    Classifier(LookupClassifierTool),
    Retrieval(RetrievalTool),
}

/// Posterior models fitted on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPosteriors {
    pub z: ZPosterior,
    pub a_given_xy: APosterior,
    /// Present in consistent mode.
    pub a_given_x: Option<APosterior>,
}

/// Everything needed to run episodes and score them for one config.
pub struct Experiment {
    config: ExperimentConfig,
    config_hash: String,
    questions: Vec<ProtocolQuestion>,
    classes: Vec<String>,
    few_shot: Vec<FewShotExample>,
    templates: PromptTemplates,
    generator: Box<dyn Generator>,
    tool: ToolBackend,
    embedder: CachedEmbedder,
}

pub struct ExperimentOutput {
    pub table: ResultTable,
    pub episodes: Vec<EpisodeRecord>,
    pub manifest: RunManifest,
}

fn split_questions<T>(items: &[T], cfg: &ExperimentConfig, f: impl Fn(&T, Split) -> ProtocolQuestion) -> Result<Vec<ProtocolQuestion>> {
    if cfg.train_size + cfg.eval_size > items.len() {
        return Err(Error::Config(format!(
            "train_size + eval_size = {} exceeds the {} available questions",
            cfg.train_size + cfg.eval_size,
            items.len()
        )));
    }
    Ok(items[..cfg.train_size]
        .iter()
        .map(|q| f(q, Split::Train))
        .chain(items[cfg.train_size..cfg.train_size + cfg.eval_size].iter().map(|q| f(q, Split::Eval)))
        .collect())
}

fn build_embedder(cfg: &EmbeddingSettings) -> Result<CachedEmbedder> {
    let inner: Box<dyn EmbeddingProvider> = match cfg.kind {
        EmbeddingKind::Hash => Box::new(HashEmbedder::try_new(cfg.dim).map_err(|e| Error::Config(e.to_string()))?),
        EmbeddingKind::Http => Box::new(HttpEmbedder::new(HttpEmbedderConfig {
            endpoint: cfg.endpoint.clone().ok_or_else(|| Error::Config("embedding endpoint missing".into()))?,
            dim: cfg.dim,
            model: cfg.model.clone(),
            timeout_secs: 30,
            retries: 2,
        })?),
    };
    Ok(CachedEmbedder { inner, cache: Mutex::new(HashMap::new()) })
}

fn build_generator(cfg: &GeneratorSettings, behavior: impl FnOnce() -> MockBehavior) -> Result<Box<dyn Generator>> {
    Ok(match cfg.kind {
        GeneratorKind::Mock => {
            let mut b = behavior();
            b.faithfulness = cfg.faithfulness;
            b.call_noise = cfg.call_noise;
            b.in_context_prior = cfg.in_context_prior;
            Box::new(MockGenerator::new(b)?)
        }
        GeneratorKind::Http => Box::new(HttpGenerator::new(&cfg.http)?),
    })
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        let embedder = build_embedder(&config.estimators.embedding)?;
        match config.mode {
            Mode::Tool => Self::prepare_tool(config, config_hash, embedder),
            Mode::Rag => Self::prepare_rag(config, config_hash, embedder),
        }
    }

    fn prepare_tool(config: &ExperimentConfig, config_hash: String, embedder: CachedEmbedder) -> Result<Self> {
        let ds = match &config.dataset.path {
            Some(p) => QaDataset::load(p)?,
            None => generate_qa_dataset(&QaGenConfig {
                kind: config.dataset.kind,
                source_path: None,
                templates_path: None,
                n_questions: config.dataset.n_questions,
                n_components: config.dataset.n_components,
                decimals: config.dataset.decimals,
                seed: derive_seed(config.seed, "datagen", 0),
            })?,
        };
        let questions = split_questions(&ds.items, config, |q, split| ProtocolQuestion {
            question_id: q.question_id.clone(),
            text: q.question_text.clone(),
            gold_answer: q.gold_answer.clone(),
            split,
        })?;
        let ids: Vec<String> = ds.items.iter().map(|q| q.question_id.clone()).collect();
        let settings = ClassifierSettings {
            noisy_fraction: config.tool.noisy_fraction,
            peak_prob: config.tool.peak_prob,
            key_rounding: config.tool.key_rounding,
            miss_policy: config.tool.miss_policy,
            render_template: ds.render_template.clone(),
        };
        let tool = LookupClassifierTool::new(&ds.table_rows(), ds.classes.clone(), &ids, &settings)
            .map_err(|e| Error::Config(e.to_string()))?;

        // few-shot examples: one per class first, in train order
        let train = &ds.items[..config.train_size];
        let mut picked: Vec<usize> = Vec::new();
        for class in &ds.classes {
            if picked.len() < config.few_shot_k {
                if let Some(i) = train.iter().position(|q| &q.gold_class == class) {
                    picked.push(i);
                }
            }
        }
        for i in 0..train.len() {
            if picked.len() >= config.few_shot_k {
                break;
            }
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        picked.sort_unstable();
        let few_shot = picked
            .iter()
            .map(|&i| {
                let q = &train[i];
                Ok(FewShotExample::new(
                    &q.question_text,
                    &format_call(&q.features),
                    &render_tool_output(&q.gold_class, &ds.render_template)?,
                    &q.gold_answer,
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let generator = build_generator(&config.generator, || {
            let mut answer_map = BTreeMap::new();
            for (class, answer) in &ds.answer_map {
                answer_map.insert(render_tool_output(class, &ds.render_template).expect("validated template"), answer.clone());
            }
            let mut distractors: Vec<String> = ds.answer_map.values().cloned().collect();
            distractors.sort();
            distractors.dedup();
            let mut b = MockBehavior::new(answer_map, 1.0, distractors);
            b.call_targets = ds.items.iter().map(|q| (q.question_text.clone(), q.features.clone())).collect();
            b
        })?;
        Ok(Self {
            config: config.clone(),
            config_hash,
            questions,
            classes: ds.classes.clone(),
            few_shot,
            templates: PromptTemplates::default(),
            generator,
            tool: ToolBackend::Classifier(tool),
            embedder,
        })
    }

    fn prepare_rag(config: &ExperimentConfig, config_hash: String, embedder: CachedEmbedder) -> Result<Self> {
        let ds = match &config.dataset.path {
            Some(p) => RagDataset::load(p)?,
            None => generate_rag_dataset(&RagGenConfig {
                questions_path: None,
                passages_path: None,
                n_questions: config.dataset.n_questions,
                n_distractors: config.dataset.n_distractors,
                gold_fraction: config.dataset.gold_fraction,
                seed: derive_seed(config.seed, "datagen", 0),
            })?,
        };
        let questions = split_questions(&ds.items, config, |q, split| ProtocolQuestion {
            question_id: q.question_id.clone(),
            text: q.question_text.clone(),
            gold_answer: q.gold_answer.clone(),
            split,
        })?;
        let retrieval = RetrievalTool::new(
            ds.corpus.clone(),
            &embedder,
            config.tool.top_k,
            config.tool.n_draws,
            config.tool.retrieval_temperature,
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        let generator = build_generator(&config.generator, || {
            let texts: HashMap<&str, &str> = ds.corpus.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
            let mut answer_map = BTreeMap::new();
            for q in &ds.items {
                if let Some(text) = q.gold_passage_id.as_deref().and_then(|g| texts.get(g)) {
                    answer_map.insert(text.trim().to_string(), q.gold_answer.clone());
                }
            }
            let mut distractors: Vec<String> = ds.items.iter().map(|q| q.gold_answer.clone()).collect();
            distractors.sort();
            distractors.dedup();
            MockBehavior::new(answer_map, 1.0, distractors)
        })?;
        let templates = PromptTemplates {
            call_instruction: String::new(),
            answer_instruction: include_str!("../templates/rag_instruction.txt").trim().to_string(),
        };
        Ok(Self {
            config: config.clone(),
            config_hash,
            questions,
            classes: Vec::new(),
            few_shot: Vec::new(),
            templates,
            generator,
            tool: ToolBackend::Retrieval(retrieval),
            embedder,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn questions(&self) -> &[ProtocolQuestion] {
        &self.questions
    }

    fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_answer_samples: self.config.n_answer_samples,
            temperature: self.config.generator.temperature,
            max_tokens: self.config.generator.max_tokens,
            parse_policy: if self.config.parse_retries == 0 {
                ParseFailurePolicy::MarkFailed
            } else {
                ParseFailurePolicy::Retry { max_retries: self.config.parse_retries }
            },
            ..Default::default()
        }
    }

    fn prompt(&self, q: &ProtocolQuestion) -> Prompt {
        Prompt { text: q.text.clone(), few_shot: self.few_shot.clone(), templates: self.templates.clone() }
    }

    fn episode_seed(&self, run: usize, index: usize) -> u64 {
        derive_seed(self.config.seed, "episode", (run * self.questions.len() + index) as u64)
    }

    fn concurrent(&self) -> bool {
        let tool_ok = match &self.tool {
            ToolBackend::Classifier(t) => crate::pipeline::Tool::supports_concurrency(t),
            ToolBackend::Retrieval(_) => true,
        };
        self.generator.supports_concurrency() && tool_ok
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = if self.concurrent() { self.config.workers } else { 1 };
        rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))
    }

    fn one_episode(&self, q: &ProtocolQuestion, run: usize, seed: u64) -> Result<EpisodeRecord> {
        let prompt = self.prompt(q);
        let gold = Some(q.gold_answer.clone());
        match &self.tool {
            ToolBackend::Classifier(tool) => {
                let ep = run_episode(&prompt, &q.question_id, self.generator.as_ref(), tool, &self.episode_config(), seed)?;
                let mut rec = EpisodeRecord::from_episode(&ep, run, gold);
                if self.config.estimators.posterior_mode == PosteriorMode::Mixed {
                    let mut req =
                        GeneratorRequest::new(Stage::ToolCall, prompt.call_context(), self.config.estimators.n_call_samples)
                            .with_seed(derive_seed(seed, "call-samples", 0));
                    req.temperature = self.config.generator.temperature;
                    req.max_tokens = self.config.generator.max_tokens;
                    rec.call_samples = self.generator.generate(&req)?;
                }
                Ok(rec)
            }
            ToolBackend::Retrieval(retrieval) => {
                let dist = retrieval.retrieval_distribution(&self.embedder.embed(&q.text)?)?;
                let docs = sample_documents(&dist, retrieval.n_draws(), derive_seed(seed, "tool", 0));
                let rendered = docs
                    .iter()
                    .map(|id| retrieval.document(id).map(|d| d.text.trim().to_string()).unwrap_or_default())
                    .collect::<Vec<_>>()
                    .join(" ");
                let mut req = GeneratorRequest::new(
                    Stage::Answer,
                    prompt.answer_context(RETRIEVE_CALL, &rendered),
                    self.config.n_answer_samples,
                )
                .with_seed(derive_seed(seed, "answers", 0));
                req.temperature = self.config.generator.temperature;
                req.max_tokens = self.config.generator.max_tokens;
                let answers = self.generator.generate(&req)?;
                if answers.len() != self.config.n_answer_samples {
                    return Err(Error::Generator(format!(
                        "asked for {} answers, got {}",
                        self.config.n_answer_samples,
                        answers.len()
                    )));
                }
                Ok(EpisodeRecord {
                    question_id: q.question_id.clone(),
                    run,
                    seed,
                    tool_call_text: RETRIEVE_CALL.into(),
                    parsed_features: None,
                    is_null: false,
                    z_label: Some(docs.join("+")),
                    tool_output: Some(rendered),
                    tool_dist: Some(dist),
                    answers,
                    call_samples: Vec::new(),
                    gold_answer: gold,
                    failure: None,
                })
            }
        }
    }

    /// Runs every (run, question) episode. Failures become failed records;
    /// if every episode failed on an upstream error, that error is returned.
    pub fn collect_episodes(&self) -> Result<Vec<EpisodeRecord>> {
        let needs_train = self.config.mode == Mode::Tool;
        let jobs: Vec<(usize, usize)> = (0..self.config.n_runs)
            .flat_map(|r| (0..self.questions.len()).map(move |i| (r, i)))
            .filter(|&(_, i)| needs_train || self.questions[i].split == Split::Eval)
            .collect();
        let results: Vec<(EpisodeRecord, Option<Error>)> = self.pool()?.install(|| {
            jobs.par_iter()
                .map(|&(run, i)| {
                    let q = &self.questions[i];
                    let seed = self.episode_seed(run, i);
                    match self.one_episode(q, run, seed) {
                        Ok(rec) => (rec, None),
                        Err(e) => {
                            log::warn!("episode failed question={} run={run} error={e}", q.question_id);
                            (EpisodeRecord::failed(&q.question_id, run, seed, &e, Some(q.gold_answer.clone())), Some(e))
                        }
                    }
                })
                .collect()
        });
        if !results.is_empty() && results.iter().all(|(_, e)| e.as_ref().is_some_and(|e| e.exit_code() == 2)) {
            return Err(results.into_iter().find_map(|(_, e)| e).expect("non-empty"));
        }
        Ok(results.into_iter().map(|(r, _)| r).collect())
    }

    fn scored(&self, samples: &[ScoredSample]) -> Vec<ScoredSample> {
        let norm = self.config.estimators.length_normalized;
        samples
            .iter()
            .map(|s| ScoredSample { log_prob: sequence_logprob(s, norm), ..s.clone() })
            .collect()
    }

    fn oracle_for(&self, question: &str) -> Box<dyn EquivalenceOracle> {
        match self.config.estimators.semantic_oracle {
            OracleKind::Exact => Box::new(ExactMatch),
            OracleKind::Normalized => Box::new(NormalizedMatch),
            OracleKind::Nli => Box::new(NliOracle::new(
                self.config.estimators.nli_endpoint.clone().unwrap_or_default(),
                question,
                Duration::from_secs(self.config.estimators.nli_timeout_secs),
            )),
        }
    }

    fn split_of(&self) -> HashMap<&str, &ProtocolQuestion> {
        self.questions.iter().map(|q| (q.question_id.as_str(), q)).collect()
    }

    /// Fits the posterior models from train-split episodes only.
    pub fn fit_posteriors(&self, episodes: &[EpisodeRecord]) -> Result<Option<FittedPosteriors>> {
        if self.config.mode != Mode::Tool {
            return Ok(None);
        }
        let by_id = self.split_of();
        let mut z_set = ZTrainingSet::default();
        let mut axy_set = ATrainingSet::default();
        let mut ax_set = ATrainingSet::default();
        let mut classes = self.classes.clone();
        for rec in episodes.iter().filter(|r| !r.is_failed()) {
            let Some(q) = by_id.get(rec.question_id.as_str()).filter(|q| q.split == Split::Train) else { continue };
            let Some(z) = &rec.z_label else { continue };
            if !classes.contains(z) {
                classes.push(z.clone());
            }
            for y in &rec.answers {
                z_set.push(z_input(&self.embedder, &y.text, &rec.tool_call_text)?, z.clone());
                if let Some(a) = &rec.parsed_features {
                    axy_set.push(a_input(&self.embedder, &q.text, &y.text)?, a.clone());
                }
            }
            if let Some(a) = &rec.parsed_features {
                ax_set.push(self.embedder.embed(&q.text)?, a.clone());
            }
        }
        if z_set.is_empty() || axy_set.is_empty() {
            log::warn!("no usable train-split episodes; full decompositions are unavailable");
            return Ok(None);
        }
        let cfg = |k: u64| TrainingConfig { seed: derive_seed(self.config.seed, "training", k), ..self.config.training.clone() };
        let consistent = self.config.estimators.posterior_mode == PosteriorMode::Consistent;
        let (z, (axy, ax)) = rayon::join(
            || train_z_posterior(&z_set, &classes, &cfg(0)),
            || {
                rayon::join(
                    || train_a_posterior(&axy_set, &cfg(1)),
                    || consistent.then(|| train_a_posterior(&ax_set, &cfg(2))).transpose(),
                )
            },
        );
        Ok(Some(FittedPosteriors { z: z?, a_given_xy: axy?, a_given_x: ax? }))
    }

    fn episode_terms(&self, q: &ProtocolQuestion, rec: &EpisodeRecord, post: Option<&FittedPosteriors>) -> Result<EntropyTerms> {
        let answers = self.scored(&rec.answers);
        let partition = cluster(answers.clone(), self.oracle_for(&q.text).as_ref())?;
        let mut terms = EntropyTerms {
            h_y_given_zx: mc_predictive_entropy(&answers)?,
            h_c_given_zx: mc_semantic_entropy(&partition)?,
            ..Default::default()
        };
        let dist: &Categorical = rec.tool_dist.as_ref().ok_or(Error::MissingTerm("tool distribution"))?;
        match self.config.mode {
            Mode::Rag => {
                terms.h_z_given_x = Some(dist.entropy() * self.config.tool.n_draws as f64);
            }
            Mode::Tool => {
                terms.h_z_given_a = Some(dist.entropy());
                if let Some(p) = post {
                    let z_in = rec
                        .answers
                        .iter()
                        .map(|y| z_input(&self.embedder, &y.text, &rec.tool_call_text))
                        .collect::<Result<Vec<_>>>()?;
                    let a_in =
                        rec.answers.iter().map(|y| a_input(&self.embedder, &q.text, &y.text)).collect::<Result<Vec<_>>>()?;
                    terms.h_z_given_ya = Some(mean_entropy_z(&p.z, &z_in)?);
                    terms.h_a_given_xy = Some(mean_entropy_a(&p.a_given_xy, &a_in)?);
                    terms.h_a_given_x = match &p.a_given_x {
                        Some(ax) => Some(ax.entropy_at(&self.embedder.embed(&q.text)?)?),
                        None if !rec.call_samples.is_empty() => Some(mc_predictive_entropy(&self.scored(&rec.call_samples))?),
                        None => None,
                    };
                }
            }
        }
        Ok(terms)
    }

    /// Scores the eval split from episode records.
    pub fn evaluate(&self, episodes: &[EpisodeRecord]) -> Result<ResultTable> {
        let posteriors = self.fit_posteriors(episodes)?;
        let mut by_question: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
        for rec in episodes {
            by_question.entry(rec.question_id.as_str()).or_default().push(rec);
        }
        let eval: Vec<&ProtocolQuestion> = self.questions.iter().filter(|q| q.split == Split::Eval).collect();
        let failed_episodes = episodes.iter().filter(|r| r.is_failed()).count();
        let scored: Vec<Option<QuestionResult>> = self.pool()?.install(|| {
            eval.par_iter()
                .map(|q| -> Result<Option<QuestionResult>> {
                    let mut recs: Vec<&EpisodeRecord> =
                        by_question.get(q.question_id.as_str()).map(|v| v.iter().copied().filter(|r| !r.is_failed()).collect()).unwrap_or_default();
                    recs.sort_by_key(|r| r.run);
                    if recs.is_empty() {
                        return Ok(None);
                    }
                    let terms = recs
                        .iter()
                        .map(|r| self.episode_terms(q, r, posteriors.as_ref()))
                        .collect::<Result<Vec<_>>>()?;
                    let mean = EntropyTerms::mean(&terms)?;
                    let mut report = match self.config.mode {
                        Mode::Tool => UncertaintyReport::tool_mode(&q.question_id, mean)?,
                        Mode::Rag => UncertaintyReport::rag_mode(&q.question_id, mean)?,
                    };
                    report.metadata.insert("runs".into(), recs.len().to_string());
                    let modal = modal_answer(recs.iter().flat_map(|r| r.answers.iter())).unwrap_or_default();
                    let g = grade(&modal, &q.gold_answer);
                    Ok(Some(QuestionResult {
                        report,
                        gold_answer: q.gold_answer.clone(),
                        modal_answer: modal,
                        grade: g,
                        correct: g.is_correct(),
                        runs_used: recs.len(),
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let excluded_questions = scored.iter().filter(|s| s.is_none()).count();
        let questions: Vec<QuestionResult> = scored.into_iter().flatten().collect();
        if excluded_questions > 0 {
            log::warn!("excluded {excluded_questions} eval question(s) with no successful episode");
        }
        let generator = self.generator.name();
        let rows = auroc_rows(&questions, self.config.mode, &generator)?;

        let mut seeds = BTreeMap::new();
        seeds.insert("master".into(), self.config.seed);
        for stage in ["datagen", "episode", "training"] {
            seeds.insert(stage.into(), derive_seed(self.config.seed, stage, 0));
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("grading".into(), GRADING_RULE.into());
        metadata.insert(
            "containment_matches".into(),
            questions.iter().filter(|q| q.grade == Grade::Containment).count().to_string(),
        );
        metadata.insert("correctness".into(), "modal answer over all runs; ties by sequence probability".into());
        metadata.insert("run_aggregation".into(), "metrics averaged across runs before AUROC".into());
        metadata.insert("activation".into(), "tanh".into());
        metadata.insert("posterior_mode".into(), format!("{:?}", self.config.estimators.posterior_mode).to_lowercase());
        metadata.insert("semantic_oracle".into(), format!("{:?}", self.config.estimators.semantic_oracle).to_lowercase());
        metadata.insert("length_normalized".into(), self.config.estimators.length_normalized.to_string());
        metadata.insert("n_eval_questions".into(), questions.len().to_string());
        metadata.insert("n_correct".into(), questions.iter().filter(|q| q.correct).count().to_string());
        metadata.insert("posteriors_fitted".into(), posteriors.is_some().to_string());
        if let Some(p) = &posteriors {
            metadata.insert("z_posterior_degenerate".into(), p.z.is_degenerate().to_string());
        }
        Ok(ResultTable {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            mode: self.config.mode,
            generator,
            seeds,
            rows,
            failed_episodes,
            excluded_questions,
            metadata,
            questions,
        })
    }

    pub fn run(&self) -> Result<ExperimentOutput> {
        let mut manifest = RunManifest::new(self.config_hash.clone(), self.config.seed);
        for stage in ["datagen", "episode", "training"] {
            manifest.record_seed(stage, derive_seed(self.config.seed, stage, 0));
        }
        manifest.component_versions.insert("generator".into(), self.generator.name());
        manifest.component_versions.insert("embedder".into(), self.embedder.name().to_string());
        let episodes = self.collect_episodes()?;
        let table = self.evaluate(&episodes)?;
        manifest.failed_episodes = table.failed_episodes;
        manifest.excluded_questions = table.excluded_questions;
        manifest.finish();
        Ok(ExperimentOutput { table, episodes, manifest })
    }
}

/// Full protocol; AUROC rows may be undefined (`None`).
pub fn run_protocol(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    Experiment::prepare(config)?.run()
}

/// Full protocol; an undefined AUROC is an error.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    let out = run_protocol(config)?;
    out.table.ensure_defined()?;
    Ok(out.table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCheck {
    pub name: String,
    pub systems: u64,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Brute-force identity suites on enumerable toy systems.
pub fn toycheck(n_systems: u64, master_seed: u64) -> Result<Vec<ToyCheck>> {
    use crate::config::rng_from_seed;
    use crate::metrics::{full_predictive_entropy, rag_predictive_entropy, sta_p};
    use crate::pipeline::{brute_force_joint, brute_force_rag, RagToySystem, ToySystem};
    use rand::Rng;

    let (mut full, mut rag, mut strong): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..n_systems {
        let mut rng = rng_from_seed(derive_seed(master_seed, "toycheck", i));
        let (na, nz, ny) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=5));
        let e = brute_force_joint(&ToySystem::random(&mut rng, na, nz, ny))?.terms;
        let t = EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_a: Some(e.h_z_given_a),
            h_a_given_x: Some(e.h_a_given_x),
            h_z_given_ya: Some(e.h_z_given_ya),
            h_a_given_xy: Some(e.h_a_given_xy),
            ..Default::default()
        };
        full = full.max((full_predictive_entropy(&t)? - e.h_y_given_x).abs());

        let ny = rng.random_range(1..=5);
        let r = brute_force_rag(&RagToySystem::random(&mut rng, 3, ny))?;
        let t = EntropyTerms {
            h_y_given_zx: r.h_y_given_zx,
            h_c_given_zx: r.h_y_given_zx,
            h_z_given_x: Some(r.h_z_given_x),
            h_z_given_yx: Some(r.h_z_given_yx),
            ..Default::default()
        };
        rag = rag.max((rag_predictive_entropy(&t)? - r.h_y_given_x).abs());

        let e = brute_force_joint(&ToySystem::strong_tool(&mut rng, 3, 5, 0.01))?.terms;
        let t = EntropyTerms {
            h_y_given_zx: e.h_y_given_zx,
            h_c_given_zx: e.h_y_given_zx,
            h_z_given_a: Some(e.h_z_given_a),
            ..Default::default()
        };
        strong = strong.max((sta_p(&t)? - e.h_y_given_x).abs());
    }
    let line = |name: &str, max_error: f64, tolerance: f64| ToyCheck {
        name: name.into(),
        systems: n_systems,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    };
    Ok(vec![
        line("full decomposition", full, 1e-9),
        line("retrieval decomposition", rag, 1e-9),
        line("strong-tool STA_P", strong, 0.05),
    ])
}
