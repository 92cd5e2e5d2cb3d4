//! Text generators that return sampled sequences with log-probabilities.
//!
//! [`MockGenerator`] is a scripted categorical sampler used for offline,
//! ground-truth experiments; [`HttpGenerator`] speaks the chat-completions
//! wire protocol with per-token log-probabilities.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::rng_from_seed;
use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::pipeline::{format_call, parse_tool_call, ContextView};
use crate::prob::{Categorical, ScoredSample};

/// Which step of the pipeline a request samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ToolCall,
    Answer,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRequest {
    pub context: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: Option<u64>,
    pub stage: Stage,
}

impl GeneratorRequest {
    pub fn new(stage: Stage, context: impl Into<String>, n_samples: usize) -> Self {
        Self { context: context.into(), n_samples, temperature: 1.0, max_tokens: 32, seed: None, stage }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GeneratorRequest) -> Result<Vec<ScoredSample>>;

    /// Whether concurrent `generate` calls are allowed.
    fn supports_concurrency(&self) -> bool {
        true
    }

    fn name(&self) -> String;
}

/// Sequence score: raw sum, or mean per token when `normalize` is set.
pub fn sequence_logprob(sample: &ScoredSample, normalize: bool) -> f64 {
    if normalize {
        sample.log_prob / sample.n_tokens.max(1) as f64
    } else {
        sample.log_prob
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBehavior {
    /// Rendered tool output → the answer it implies.
    pub answer_map: BTreeMap<String, String>,
    /// Probability of following the tool output.
    pub faithfulness: f64,
    pub distractor_answers: Vec<String>,
    /// Probability of emitting a perturbed tool call.
    pub call_noise: f64,
    /// Question text → correct tool-call features.
    #[serde(default)]
    pub call_targets: BTreeMap<String, Vec<f64>>,
    /// When the generator does not follow the tool, answer with the
    /// few-shot example nearest to the current call instead of a uniform
    /// distractor.
    #[serde(default)]
    pub in_context_prior: bool,
}

impl MockBehavior {
    pub fn new(answer_map: BTreeMap<String, String>, faithfulness: f64, distractor_answers: Vec<String>) -> Self {
        Self {
            answer_map,
            faithfulness,
            distractor_answers,
            call_noise: 0.0,
            call_targets: BTreeMap::new(),
            in_context_prior: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.faithfulness) {
            return Err(Error::Config(format!("faithfulness {} outside [0, 1]", self.faithfulness)));
        }
        if !(0.0..=1.0).contains(&self.call_noise) {
            return Err(Error::Config(format!("call_noise {} outside [0, 1]", self.call_noise)));
        }
        Ok(())
    }
}

pub struct MockGenerator {
    behavior: MockBehavior,
}

impl MockGenerator {
    pub fn new(behavior: MockBehavior) -> Result<Self> {
        behavior.validate()?;
        Ok(Self { behavior })
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }

    /// The categorical the mock samples answers from for this context.
    pub fn answer_distribution(&self, context: &str) -> Result<Categorical> {
        let view = ContextView::parse(context);
        let b = &self.behavior;
        let prior = if b.in_context_prior { view.nearest_example_answer() } else { None };
        let mut weights: Vec<(String, f64)> = Vec::new();
        let mut add = |label: &str, w: f64| {
            if w <= 0.0 {
                return;
            }
            match weights.iter_mut().find(|(l, _)| l == label) {
                Some((_, acc)) => *acc += w,
                None => weights.push((label.to_string(), w)),
            }
        };
        let followed = view.tool_output.as_deref().and_then(|o| b.answer_map.get(o.trim()));
        let lead = followed.cloned().or_else(|| prior.clone());
        match lead {
            Some(lead) => {
                let strays = |skip: &str| -> Vec<&String> { b.distractor_answers.iter().filter(|d| *d != skip).collect() };
                let leftover = 1.0 - b.faithfulness;
                add(&lead, b.faithfulness);
                match prior.as_ref().filter(|_| followed.is_some()) {
                    Some(p) => add(p, leftover),
                    None => {
                        let alts = strays(&lead);
                        if alts.is_empty() {
                            add(&lead, leftover);
                        } else {
                            for d in &alts {
                                add(d, leftover / alts.len() as f64);
                            }
                        }
                    }
                }
            }
            None => {
                if b.distractor_answers.is_empty() {
                    return Err(Error::Generator(format!(
                        "mock has no answer for tool output {:?} and no distractors",
                        view.tool_output
                    )));
                }
                for d in &b.distractor_answers {
                    add(d, 1.0 / b.distractor_answers.len() as f64);
                }
            }
        }
        let (labels, probs): (Vec<String>, Vec<f64>) = weights.into_iter().unzip();
        Categorical::from_weights(labels, probs)
    }

    fn sample_calls(&self, request: &GeneratorRequest, rng: &mut impl Rng) -> Result<Vec<ScoredSample>> {
        let view = ContextView::parse(&request.context);
        let question = view
            .question
            .as_deref()
            .ok_or_else(|| Error::Generator("tool-call context has no question line".into()))?;
        let target = self
            .behavior
            .call_targets
            .get(question.trim())
            .ok_or_else(|| Error::Generator(format!("no call target for question {question:?}")))?;
        let noise = self.behavior.call_noise;
        let d = target.len().max(1);
        let mut out = Vec::with_capacity(request.n_samples);
        for _ in 0..request.n_samples {
            if noise > 0.0 && rng.random::<f64>() < noise {
                let mut features = target.clone();
                if !features.is_empty() {
                    let i = rng.random_range(0..features.len());
                    let delta = if rng.random::<bool>() { 0.1 } else { -0.1 };
                    features[i] += delta;
                }
                let lp = (noise / (2 * d) as f64).ln();
                out.push(ScoredSample::with_tokens(format_call(&features), lp, d));
            } else {
                out.push(ScoredSample::with_tokens(format_call(target), (1.0 - noise).ln(), d));
            }
        }
        Ok(out)
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GeneratorRequest) -> Result<Vec<ScoredSample>> {
        request.validate()?;
        let mut rng = rng_from_seed(request.seed.unwrap_or(0));
        match request.stage {
            Stage::ToolCall => self.sample_calls(request, &mut rng),
            Stage::Answer => {
                let dist = self.answer_distribution(&request.context)?;
                Ok((0..request.n_samples)
                    .map(|_| {
                        let i = dist.sample_index(&mut rng);
                        ScoredSample::new(dist.labels()[i].clone(), dist.probs()[i].ln())
                    })
                    .collect())
            }
            Stage::Paraphrase => {
                Ok(vec![ScoredSample::new(request.context.trim().to_string(), 0.0); request.n_samples])
            }
        }
    }

    fn name(&self) -> String {
        format!("mock(faithfulness={})", self.behavior.faithfulness)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpGeneratorConfig {
    /// Full chat-completions URL; falls back to `$TOOLUQ_ENDPOINT`.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer credential.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retries: usize,
    pub system_prompt: Option<String>,
}

impl Default for HttpGeneratorConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "default".into(),
            api_key_env: "TOOLUQ_API_KEY".into(),
            max_in_flight: 4,
            timeout_secs: 60,
            retries: 2,
            system_prompt: None,
        }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpGenerator {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    system_prompt: Option<String>,
    client: JsonClient,
    in_flight: InFlight,
}

impl HttpGenerator {
    pub fn new(config: &HttpGeneratorConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .or_else(|| std::env::var("TOOLUQ_ENDPOINT").ok())
            .ok_or_else(|| Error::Config("http generator needs an endpoint (config or $TOOLUQ_ENDPOINT)".into()))?;
        if config.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(Self {
            endpoint,
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            system_prompt: config.system_prompt.clone(),
            client: JsonClient::new(Duration::from_secs(config.timeout_secs), config.retries),
            in_flight: InFlight { count: Mutex::new(0), freed: Condvar::new(), limit: config.max_in_flight },
        })
    }

    fn request_body(&self, request: &GeneratorRequest, n: usize) -> Value {
        let mut messages = Vec::new();
        if let Some(sys) = &self.system_prompt {
            messages.push(json!({"role": "system", "content": sys}));
        }
        messages.push(json!({"role": "user", "content": request.context}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "n": n,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": true,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Extracts `(content, Σ token logprob, token count)` per choice.
pub(crate) fn parse_chat_choices(reply: &Value) -> Result<Vec<ScoredSample>> {
    let choices = reply
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Upstream("reply has no choices array".into()))?;
    choices
        .iter()
        .map(|choice| {
            let content = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Upstream("choice has no message content".into()))?;
            let tokens = choice
                .pointer("/logprobs/content")
                .and_then(Value::as_array)
                .ok_or(Error::MissingLogprobs)?;
            let mut sum = 0.0;
            for t in tokens {
                let lp = t.get("logprob").and_then(Value::as_f64).ok_or(Error::MissingLogprobs)?;
                sum += lp;
            }
            Ok(ScoredSample::with_tokens(content.trim(), sum, tokens.len().max(1)))
        })
        .collect()
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GeneratorRequest) -> Result<Vec<ScoredSample>> {
        request.validate()?;
        let mut out = Vec::with_capacity(request.n_samples);
        // servers may return fewer choices than requested
        let mut rounds = 0;
        while out.len() < request.n_samples {
            rounds += 1;
            if rounds > request.n_samples + 1 {
                return Err(Error::Upstream("server keeps returning no choices".into()));
            }
            let body = self.request_body(request, request.n_samples - out.len());
            let reply = {
                let _slot = self.in_flight.acquire();
                self.client.post(&self.endpoint, self.api_key.as_deref(), &body)
            }
            .map_err(|e| e.context("chat completions"))?;
            let mut got = parse_chat_choices(&reply)?;
            got.truncate(request.n_samples - out.len());
            out.extend(got);
        }
        Ok(out)
    }

    fn name(&self) -> String {
        self.model.clone()
    }
}

pub fn is_tool_call_text(text: &str) -> bool {
    parse_tool_call(text, 0.0).parsed_features.is_some()
}
