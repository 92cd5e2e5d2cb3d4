//! One question through the pipeline: tool call `a ~ p(a|x)`, tool output
//! `z ~ p(z|a)`, answers `y ~ p(y|z,x)`. Also hosts the fully enumerable toy
//! systems used as brute-force oracles for the entropy decompositions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, rng_from_seed};
use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorRequest, Stage};
use crate::prob::{entropy_of_probs, Categorical, ScoredSample};

pub const QUESTION_PREFIX: &str = "Question:";
pub const CALL_PREFIX: &str = "Tool call:";
pub const OUTPUT_PREFIX: &str = "Tool output:";
pub const ANSWER_PREFIX: &str = "Answer:";
/// Tool-distribution label used for the null tool.
pub const NULL_TOOL_LABEL: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub call_instruction: String,
    pub answer_instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            call_instruction: include_str!("../templates/call_instruction.txt").trim().to_string(),
            answer_instruction: include_str!("../templates/answer_instruction.txt").trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub tool_call: String,
    pub tool_output: String,
    pub answer: String,
}

impl FewShotExample {
    pub fn new(question: &str, tool_call: &str, tool_output: &str, answer: &str) -> Self {
        Self {
            question: question.into(),
            tool_call: tool_call.into(),
            tool_output: tool_output.into(),
            answer: answer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub few_shot: Vec<FewShotExample>,
    #[serde(default)]
    pub templates: PromptTemplates,
}

impl Prompt {
    pub fn new(text: impl Into<String>, few_shot: Vec<FewShotExample>) -> Self {
        Self { text: text.into(), few_shot, templates: PromptTemplates::default() }
    }

    pub fn call_context(&self) -> String {
        let mut out = format!("{}\n\n", self.templates.call_instruction);
        for ex in &self.few_shot {
            out += &format!("{QUESTION_PREFIX} {}\n{CALL_PREFIX} {}\n\n", ex.question, ex.tool_call);
        }
        out += &format!("{QUESTION_PREFIX} {}\n{CALL_PREFIX}", self.text);
        out
    }

    pub fn answer_context(&self, tool_call: &str, tool_output: &str) -> String {
        let mut out = format!("{}\n\n", self.templates.answer_instruction);
        for ex in &self.few_shot {
            out += &format!(
                "{QUESTION_PREFIX} {}\n{CALL_PREFIX} {}\n{OUTPUT_PREFIX} {}\n{ANSWER_PREFIX} {}\n\n",
                ex.question, ex.tool_call, ex.tool_output, ex.answer
            );
        }
        out += &format!(
            "{QUESTION_PREFIX} {}\n{CALL_PREFIX} {tool_call}\n{OUTPUT_PREFIX} {tool_output}\n{ANSWER_PREFIX}",
            self.text
        );
        out
    }
}

/// Structured view of a context produced by [`Prompt`].
#[derive(Debug, Default, Clone, PartialEq)]
pub(crate) struct ContextView {
    pub question: Option<String>,
    pub tool_call: Option<String>,
    pub tool_output: Option<String>,
    /// Completed few-shot blocks: (call features, answer).
    pub examples: Vec<(Vec<f64>, String)>,
}

impl ContextView {
    pub fn parse(context: &str) -> Self {
        #[derive(Default)]
        struct Block {
            question: Option<String>,
            call: Option<String>,
            output: Option<String>,
            answer: Option<String>,
        }
        let mut blocks: Vec<Block> = Vec::new();
        for line in context.lines() {
            let line = line.trim();
            let field = |p: &str| line.strip_prefix(p).map(|r| r.trim().to_string());
            if let Some(q) = field(QUESTION_PREFIX) {
                blocks.push(Block { question: Some(q), ..Default::default() });
            } else if let Some(b) = blocks.last_mut() {
                if let Some(c) = field(CALL_PREFIX) {
                    b.call = Some(c);
                } else if let Some(o) = field(OUTPUT_PREFIX) {
                    b.output = Some(o);
                } else if let Some(a) = field(ANSWER_PREFIX) {
                    b.answer = Some(a);
                }
            }
        }
        let Some(current) = blocks.pop() else { return Self::default() };
        let examples = blocks
            .into_iter()
            .filter_map(|b| {
                let features = parse_tool_call(b.call.as_deref()?, 0.0).parsed_features?;
                let answer = b.answer.filter(|a| !a.is_empty())?;
                Some((features, answer))
            })
            .collect();
        Self {
            question: current.question,
            tool_call: current.call.filter(|c| !c.is_empty()),
            tool_output: current.output,
            examples,
        }
    }

    /// Answer of the few-shot example whose call is closest (Euclidean) to the current call.
    pub fn nearest_example_answer(&self) -> Option<String> {
        let current = parse_tool_call(self.tool_call.as_deref()?, 0.0).parsed_features?;
        self.examples
            .iter()
            .filter(|(f, _)| f.len() == current.len())
            .map(|(f, a)| (f.iter().zip(&current).map(|(x, y)| (x - y).powi(2)).sum::<f64>(), a))
            .min_by(|l, r| l.0.total_cmp(&r.0))
            .map(|(_, a)| a.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub raw_text: String,
    /// Present iff parsing succeeded and the call is not null.
    pub parsed_features: Option<Vec<f64>>,
    pub log_prob: f64,
    pub is_null: bool,
}

impl ToolCall {
    pub fn is_parsed(&self) -> bool {
        self.is_null || self.parsed_features.is_some()
    }
}

/// Renders features as the bracketed call format, e.g. `[5.1, 3.5]`.
pub fn format_call(features: &[f64]) -> String {
    let parts: Vec<String> = features.iter().map(|f| format!("{}", (f * 1e6).round() / 1e6 + 0.0)).collect();
    format!("[{}]", parts.join(", "))
}

/// Extracts the first bracketed span as a comma-separated list of reals;
/// `[none]` denotes the null tool.
pub fn parse_tool_call(raw: &str, log_prob: f64) -> ToolCall {
    let span = raw.find('[').and_then(|start| raw[start + 1..].find(']').map(|end| &raw[start + 1..start + 1 + end]));
    let mut call = ToolCall { raw_text: raw.trim().to_string(), parsed_features: None, log_prob, is_null: false };
    let Some(inner) = span.map(str::trim) else { return call };
    if inner.eq_ignore_ascii_case(NULL_TOOL_LABEL) {
        call.is_null = true;
        return call;
    }
    if inner.is_empty() {
        return call;
    }
    let parsed: std::result::Result<Vec<f64>, _> = inner.split(',').map(|p| p.trim().parse::<f64>()).collect();
    call.parsed_features = parsed.ok().filter(|v| v.iter().all(|x| x.is_finite()));
    call
}

/// Substitutes the single `{}` placeholder.
pub fn render_tool_output(label: &str, template: &str) -> Result<String> {
    match template.matches("{}").count() {
        1 => Ok(template.replacen("{}", label, 1)),
        0 => Err(Error::InvalidArgument(format!("template {template:?} has no {{}} placeholder"))),
        n => Err(Error::InvalidArgument(format!("template {template:?} has {n} placeholders"))),
    }
}

/// A tool with a known output distribution `p(z|a)`.
pub trait Tool: Send + Sync {
    fn distribution(&self, call: &ToolCall, question_id: &str) -> Result<Categorical>;

    fn render(&self, label: &str) -> Result<String>;

    fn supports_concurrency(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOutput {
    pub label: String,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSample {
    pub question_id: String,
    pub prompt: Prompt,
    pub tool_call: ToolCall,
    pub tool_output: ToolOutput,
    pub tool_dist: Categorical,
    pub answers: Vec<ScoredSample>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ParseFailurePolicy {
    /// Mark the episode failed; it is excluded from metrics and counted.
    #[default]
    MarkFailed,
    /// Resample the call up to `max_retries` more times.
    Retry { max_retries: usize },
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_answer_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub parse_policy: ParseFailurePolicy,
    /// Rendered tool output when the call is null.
    pub null_output: String,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_answer_samples: 10,
            temperature: 1.0,
            max_tokens: 32,
            parse_policy: ParseFailurePolicy::MarkFailed,
            null_output: "No tool was used.".into(),
        }
    }
}

pub fn run_episode(
    prompt: &Prompt,
    question_id: &str,
    generator: &dyn Generator,
    tool: &dyn Tool,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeSample> {
    if config.n_answer_samples == 0 {
        return Err(Error::InvalidArgument("n_answer_samples must be >= 1".into()));
    }
    let attempts = match config.parse_policy {
        ParseFailurePolicy::MarkFailed => 1,
        ParseFailurePolicy::Retry { max_retries } => 1 + max_retries,
    };
    let call_context = prompt.call_context();
    let mut call = None;
    let mut last_raw = String::new();
    for attempt in 0..attempts {
        let mut req = GeneratorRequest::new(Stage::ToolCall, call_context.clone(), 1)
            .with_seed(derive_seed(seed, "call", attempt as u64));
        req.temperature = config.temperature;
        req.max_tokens = config.max_tokens;
        let sample = generator
            .generate(&req)
            .map_err(|e| e.context(format_args!("question {question_id}: tool call")))?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Generator("generator returned no tool call".into()))?;
        let parsed = parse_tool_call(&sample.text, sample.log_prob);
        if parsed.is_parsed() {
            call = Some(parsed);
            break;
        }
        last_raw = sample.text;
    }
    let call = call.ok_or(Error::UnparseableToolCall { raw: last_raw, attempts })?;

    let (tool_dist, tool_output) = if call.is_null {
        let output = ToolOutput { label: NULL_TOOL_LABEL.into(), rendered: config.null_output.clone() };
        (Categorical::point_mass(NULL_TOOL_LABEL), output)
    } else {
        let dist = tool.distribution(&call, question_id)?;
        let mut rng = rng_from_seed(derive_seed(seed, "tool", 0));
        let label = dist.sample(&mut rng).to_string();
        let rendered = tool.render(&label)?;
        (dist, ToolOutput { label, rendered })
    };

    let mut req = GeneratorRequest::new(
        Stage::Answer,
        prompt.answer_context(&call.raw_text, &tool_output.rendered),
        config.n_answer_samples,
    )
    .with_seed(derive_seed(seed, "answers", 0));
    req.temperature = config.temperature;
    req.max_tokens = config.max_tokens;
    let answers = generator
        .generate(&req)
        .map_err(|e| e.context(format_args!("question {question_id}: answers")))?;
    if answers.len() != config.n_answer_samples {
        return Err(Error::Generator(format!(
            "asked for {} answers, got {}",
            config.n_answer_samples,
            answers.len()
        )));
    }
    Ok(EpisodeSample {
        question_id: question_id.to_string(),
        prompt: prompt.clone(),
        tool_call: call,
        tool_output,
        tool_dist,
        answers,
        seed,
    })
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub question_id: String,
    pub run: usize,
    pub seed: u64,
    pub tool_call_text: String,
    pub parsed_features: Option<Vec<f64>>,
    pub is_null: bool,
    pub z_label: Option<String>,
    pub tool_output: Option<String>,
    pub tool_dist: Option<Categorical>,
    pub answers: Vec<ScoredSample>,
    #[serde(default)]
    pub call_samples: Vec<ScoredSample>,
    pub gold_answer: Option<String>,
    pub failure: Option<String>,
}

impl EpisodeRecord {
    pub fn from_episode(ep: &EpisodeSample, run: usize, gold_answer: Option<String>) -> Self {
        Self {
            question_id: ep.question_id.clone(),
            run,
            seed: ep.seed,
            tool_call_text: ep.tool_call.raw_text.clone(),
            parsed_features: ep.tool_call.parsed_features.clone(),
            is_null: ep.tool_call.is_null,
            z_label: Some(ep.tool_output.label.clone()),
            tool_output: Some(ep.tool_output.rendered.clone()),
            tool_dist: Some(ep.tool_dist.clone()),
            answers: ep.answers.clone(),
            call_samples: Vec::new(),
            gold_answer,
            failure: None,
        }
    }

    pub fn failed(question_id: &str, run: usize, seed: u64, error: &Error, gold_answer: Option<String>) -> Self {
        let raw = match error {
            Error::UnparseableToolCall { raw, .. } => raw.clone(),
            _ => String::new(),
        };
        Self {
            question_id: question_id.to_string(),
            run,
            seed,
            tool_call_text: raw,
            parsed_features: None,
            is_null: false,
            z_label: None,
            tool_output: None,
            tool_dist: None,
            answers: Vec::new(),
            call_samples: Vec::new(),
            gold_answer,
            failure: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// A small, fully enumerable system: `p(a|x) p(z|a) p(y|z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySystem {
    pub prompt_id: String,
    pub call_dist: Categorical,
    pub tool_table: BTreeMap<String, Categorical>,
    pub answer_table: BTreeMap<String, Categorical>,
}

/// Every term of the predictive-entropy decomposition, exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactTerms {
    pub h_y_given_x: f64,
    pub h_y_given_zx: f64,
    pub h_z_given_a: f64,
    pub h_a_given_x: f64,
    pub h_z_given_ya: f64,
    pub h_a_given_xy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub a: String,
    pub z: String,
    pub y: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub entries: Vec<JointEntry>,
    pub terms: ExactTerms,
}

pub const ENUMERATION_LIMIT: usize = 1_000_000;

fn random_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // exponential spacings give a flat Dirichlet draw
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl ToySystem {
    pub fn new(
        call_dist: Categorical,
        tool_table: BTreeMap<String, Categorical>,
        answer_table: BTreeMap<String, Categorical>,
    ) -> Result<Self> {
        for a in call_dist.labels() {
            let dist = tool_table
                .get(a)
                .ok_or_else(|| Error::InvalidArgument(format!("no tool distribution for call {a:?}")))?;
            for z in dist.labels() {
                if !answer_table.contains_key(z) {
                    return Err(Error::InvalidArgument(format!("no answer distribution for output {z:?}")));
                }
            }
        }
        Ok(Self { prompt_id: "toy".into(), call_dist, tool_table, answer_table })
    }

    /// Random system with flat-Dirichlet tables.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_calls: usize, n_outputs: usize, n_answers: usize) -> Self {
        let (a_l, z_l, y_l) = (labels("a", n_calls), labels("z", n_outputs), labels("y", n_answers));
        let call_dist = Categorical::from_weights(a_l.clone(), random_weights(rng, n_calls)).unwrap();
        let tool_table = a_l
            .iter()
            .map(|a| (a.clone(), Categorical::from_weights(z_l.clone(), random_weights(rng, n_outputs)).unwrap()))
            .collect();
        let answer_table = z_l
            .iter()
            .map(|z| (z.clone(), Categorical::from_weights(y_l.clone(), random_weights(rng, n_answers)).unwrap()))
            .collect();
        Self { prompt_id: "toy".into(), call_dist, tool_table, answer_table }
    }

    /// Strong-tool system: the call is a point mass and each output has a
    /// distinct gold answer; at most `max_leak` total mass goes off-gold.
    pub fn strong_tool<R: Rng + ?Sized>(rng: &mut R, n_outputs: usize, n_answers: usize, max_leak: f64) -> Self {
        assert!(n_answers >= n_outputs, "strong-tool systems need a distinct gold answer per output");
        let z_l = labels("z", n_outputs);
        let y_l = labels("y", n_answers);
        let call_dist = Categorical::point_mass("a0");
        let mut tool_table = BTreeMap::new();
        tool_table.insert("a0".to_string(), Categorical::from_weights(z_l.clone(), random_weights(rng, n_outputs)).unwrap());
        let answer_table = z_l
            .iter()
            .enumerate()
            .map(|(gold, z)| {
                let leak = max_leak * rng.random::<f64>();
                let spread = random_weights(rng, n_answers - 1);
                let mut probs = Vec::with_capacity(n_answers);
                let mut others = spread.into_iter();
                for k in 0..n_answers {
                    probs.push(if k == gold { 1.0 - leak } else { leak * others.next().unwrap() });
                }
                (z.clone(), Categorical::from_weights(y_l.clone(), probs).unwrap())
            })
            .collect();
        Self { prompt_id: "toy-strong".into(), call_dist, tool_table, answer_table }
    }

    /// Ancestral draw of `(a, z, y)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (String, String, String) {
        let a = self.call_dist.sample(rng).to_string();
        let z = self.tool_table[&a].sample(rng).to_string();
        let y = self.answer_table[&z].sample(rng).to_string();
        (a, z, y)
    }

    fn answer_space(&self) -> Vec<String> {
        let mut ys: Vec<String> = self.answer_table.values().flat_map(|d| d.labels().iter().cloned()).collect();
        ys.sort();
        ys.dedup();
        ys
    }
}

/// Joint entropy of a marginal built by `key` over the joint entries.
fn marginal_entropy<K: Ord>(entries: &[JointEntry], key: impl Fn(&JointEntry) -> K) -> f64 {
    let mut m: BTreeMap<K, f64> = BTreeMap::new();
    for e in entries {
        *m.entry(key(e)).or_insert(0.0) += e.p;
    }
    entropy_of_probs(&m.into_values().collect::<Vec<_>>())
}

/// Exhaustive enumeration of `p(y, z, a | x)` and every decomposition term.
pub fn brute_force_joint(system: &ToySystem) -> Result<JointTable> {
    let n_z: usize = {
        let mut zs: Vec<&String> = system.tool_table.values().flat_map(|d| d.labels()).collect();
        zs.sort();
        zs.dedup();
        zs.len()
    };
    let size = system.call_dist.len() * n_z * system.answer_space().len();
    if size > ENUMERATION_LIMIT {
        return Err(Error::SizeLimit { size, limit: ENUMERATION_LIMIT });
    }
    let mut entries = Vec::new();
    for (a, pa) in system.call_dist.iter() {
        let tool = system
            .tool_table
            .get(a)
            .ok_or_else(|| Error::InvalidArgument(format!("no tool distribution for call {a:?}")))?;
        for (z, pz) in tool.iter() {
            let answers = system
                .answer_table
                .get(z)
                .ok_or_else(|| Error::InvalidArgument(format!("no answer distribution for output {z:?}")))?;
            for (y, py) in answers.iter() {
                entries.push(JointEntry { a: a.into(), z: z.into(), y: y.into(), p: pa * pz * py });
            }
        }
    }
    let h_a = marginal_entropy(&entries, |e| e.a.clone());
    let h_z = marginal_entropy(&entries, |e| e.z.clone());
    let h_y = marginal_entropy(&entries, |e| e.y.clone());
    let h_za = marginal_entropy(&entries, |e| (e.z.clone(), e.a.clone()));
    let h_yz = marginal_entropy(&entries, |e| (e.y.clone(), e.z.clone()));
    let h_ya = marginal_entropy(&entries, |e| (e.y.clone(), e.a.clone()));
    let h_yza = marginal_entropy(&entries, |e| (e.y.clone(), e.z.clone(), e.a.clone()));
    let terms = ExactTerms {
        h_y_given_x: h_y,
        h_y_given_zx: h_yz - h_z,
        h_z_given_a: h_za - h_a,
        h_a_given_x: h_a,
        h_z_given_ya: h_yza - h_ya,
        h_a_given_xy: h_ya - h_y,
    };
    Ok(JointTable { entries, terms })
}

/// Enumerable retrieval system: `p(z|x) p(y|z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagToySystem {
    pub retrieval: Categorical,
    pub answer_table: BTreeMap<String, Categorical>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RagExactTerms {
    pub h_y_given_x: f64,
    pub h_y_given_zx: f64,
    pub h_z_given_x: f64,
    pub h_z_given_yx: f64,
}

impl RagToySystem {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_docs: usize, n_answers: usize) -> Self {
        let docs = labels("doc", n_docs);
        let ys = labels("y", n_answers);
        let retrieval = Categorical::from_weights(docs.clone(), random_weights(rng, n_docs)).unwrap();
        let answer_table = docs
            .iter()
            .map(|d| (d.clone(), Categorical::from_weights(ys.clone(), random_weights(rng, n_answers)).unwrap()))
            .collect();
        Self { retrieval, answer_table }
    }
}

pub fn brute_force_rag(system: &RagToySystem) -> Result<RagExactTerms> {
    let mut entries = Vec::new();
    for (z, pz) in system.retrieval.iter() {
        let answers = system
            .answer_table
            .get(z)
            .ok_or_else(|| Error::InvalidArgument(format!("no answer distribution for document {z:?}")))?;
        for (y, py) in answers.iter() {
            entries.push(JointEntry { a: String::new(), z: z.into(), y: y.into(), p: pz * py });
        }
    }
    if entries.len() > ENUMERATION_LIMIT {
        return Err(Error::SizeLimit { size: entries.len(), limit: ENUMERATION_LIMIT });
    }
    let h_z = marginal_entropy(&entries, |e| e.z.clone());
    let h_y = marginal_entropy(&entries, |e| e.y.clone());
    let h_yz = marginal_entropy(&entries, |e| (e.y.clone(), e.z.clone()));
    Ok(RagExactTerms { h_y_given_x: h_y, h_y_given_zx: h_yz - h_z, h_z_given_x: h_z, h_z_given_yx: h_yz - h_y })
}
