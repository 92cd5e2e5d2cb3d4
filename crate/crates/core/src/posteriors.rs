//! Fitted posterior models for the negative terms of the decomposition:
//! a classifier for `p(z | y, a)` and a diagonal Gaussian regressor for
//! `p(a | x, y)`, both one-hidden-layer tanh networks trained by
//! full-batch gradient descent.

use std::collections::BTreeMap;
use std::time::Duration;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::rng_from_seed;
use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::prob::{entropy_of_probs, gaussian_entropy, softmax, ScoredSample};

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
    fn name(&self) -> &str {
        "embedder"
    }
}

/// Signed feature hashing of lowercase word tokens, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    dim: usize,
}

pub const MIN_HASH_DIM: usize = 8;

impl HashEmbedder {
    /// Panics if `dim < 8`; use [`HashEmbedder::try_new`] for checked input.
    pub fn new(dim: usize) -> Self {
        Self::try_new(dim).expect("hash embedding dimension")
    }

    pub fn try_new(dim: usize) -> Result<Self> {
        if dim < MIN_HASH_DIM {
            return Err(Error::InvalidArgument(format!("hash embedding dimension {dim} < {MIN_HASH_DIM}")));
        }
        Ok(Self { dim })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '.' || c == '_' || c == '-'))
        .map(|t| t.trim_matches(|c| c == '.' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn hash_embedder(text: &str, dim: usize) -> Result<Vec<f64>> {
    HashEmbedder::try_new(dim)?.embed(text)
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut toks = tokens(text);
        if toks.is_empty() {
            toks.push("\u{0}empty".into());
        }
        for t in &toks {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every token cancelled; fall back to a fixed unit direction
            v[0] = 1.0;
            return Ok(v);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "hash"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    pub dim: usize,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> u64 {
    30
}

fn default_retries() -> usize {
    2
}

/// Remote sentence encoder: POST `{"input": text}`, reply carrying either
/// `embedding` or `data[0].embedding`.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let client = JsonClient::new(Duration::from_secs(config.timeout_secs), config.retries);
        Ok(Self { config, client })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut body = json!({ "input": text });
        if let Some(m) = &self.config.model {
            body["model"] = json!(m);
        }
        let reply = self.client.post(&self.config.endpoint, None, &body)?;
        let arr = reply
            .get("embedding")
            .or_else(|| reply.pointer("/data/0/embedding"))
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Upstream("embedding reply has no embedding array".into()))?;
        let v = arr
            .iter()
            .map(|x| x.as_f64().filter(|f| f.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Upstream("embedding contains a non-numeric entry".into()))?;
        if v.len() != self.config.dim {
            return Err(Error::Upstream(format!("embedding dimension {} != configured {}", v.len(), self.config.dim)));
        }
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn name(&self) -> &str {
        "http"
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// One hidden layer, row-major weights: `w1` is `hidden × input`,
/// `w2` is `output × hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Gradients with the same layout as [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGradients {
    fn zeros_like(m: &Mlp) -> Self {
        Self { w1: vec![0.0; m.w1.len()], b1: vec![0.0; m.b1.len()], w2: vec![0.0; m.w2.len()], b2: vec![0.0; m.b2.len()] }
    }

    pub fn norm(&self) -> f64 {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().flat_map(|v| v.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output_dim * hidden],
            b2: vec![0.0; output_dim],
            activation: Activation::Tanh,
        }
    }

    /// Gaussian init scaled by fan-in; biases start at zero.
    pub fn init(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut m = Self::zeros(input_dim, hidden, output_dim);
        let mut rng = rng_from_seed(seed);
        let n1 = Normal::new(0.0, 1.0 / (input_dim.max(1) as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, 1.0 / (hidden.max(1) as f64).sqrt()).expect("finite std");
        m.w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        m.w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        m
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::InvalidArgument(format!("input dimension {} != model {}", x.len(), self.input_dim)));
        }
        Ok(())
    }

    fn hidden_layer(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                let pre = self.b1[j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                match self.activation {
                    Activation::Tanh => pre.tanh(),
                }
            })
            .collect()
    }

    fn output_layer(&self, h: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|k| {
                let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
                self.b2[k] + row.iter().zip(h).map(|(w, hj)| w * hj).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.output_layer(&self.hidden_layer(x)))
    }

    fn step(&mut self, g: &MlpGradients, lr: f64) {
        for (p, d) in [(&mut self.w1, &g.w1), (&mut self.b1, &g.b1), (&mut self.w2, &g.w2), (&mut self.b2, &g.b2)] {
            p.iter_mut().zip(d).for_each(|(p, d)| *p -= lr * d);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

/// Inputs with targets and optional per-row weights (duplicate rows can be
/// merged into one weighted row without changing the loss).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    pub weights: Option<Vec<f64>>,
}

impl Batch {
    pub fn labels(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        Self { inputs, targets: Targets::Labels(labels), weights: None }
    }

    pub fn values(inputs: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Self {
        Self { inputs, targets: Targets::Values(values), weights: None }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn total_weight(&self) -> f64 {
        self.weights.as_ref().map_or(self.len() as f64, |w| w.iter().sum())
    }
}

/// Cross-entropy over softmax logits, or the Gaussian negative
/// log-likelihood where the output holds `d` means then `d` raw scales and
/// each variance is `floor_k + exp(raw_k)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    CrossEntropy,
    GaussianNll { floors: Vec<f64> },
}

fn validate(model: &Mlp, batch: &Batch, loss: &Loss) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    for x in &batch.inputs {
        model.check_input(x)?;
    }
    if let Some(w) = &batch.weights {
        if w.len() != batch.len() || w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(batch.total_weight() > 0.0) {
            return Err(Error::InvalidArgument("batch weights must be non-negative with positive total".into()));
        }
    }
    match (&batch.targets, loss) {
        (Targets::Labels(l), Loss::CrossEntropy) => {
            if l.len() != batch.len() || l.iter().any(|&k| k >= model.output_dim) {
                return Err(Error::InvalidArgument("labels out of range or miscounted".into()));
            }
        }
        (Targets::Values(v), Loss::GaussianNll { floors }) => {
            let d = floors.len();
            if model.output_dim != 2 * d || v.len() != batch.len() || v.iter().any(|t| t.len() != d) {
                return Err(Error::InvalidArgument("gaussian targets do not match model output".into()));
            }
            if floors.iter().any(|f| !(*f > 0.0)) {
                return Err(Error::InvalidArgument("variance floors must be positive".into()));
            }
        }
        _ => return Err(Error::InvalidArgument("target kind does not match loss".into())),
    }
    Ok(())
}

/// Per-sample loss and its gradient with respect to the output layer.
/// With `precondition`, mean-output gradients are scaled by the predicted
/// variance so a fixed step stays stable as variances approach the floor.
fn output_loss(out: &[f64], i: usize, targets: &Targets, loss: &Loss, precondition: bool) -> (f64, Vec<f64>) {
    match (targets, loss) {
        (Targets::Labels(l), Loss::CrossEntropy) => {
            let mut p = softmax(out);
            let y = l[i];
            let value = -p[y].max(f64::MIN_POSITIVE).ln();
            p[y] -= 1.0;
            (value, p)
        }
        (Targets::Values(v), Loss::GaussianNll { floors }) => {
            let d = floors.len();
            let t = &v[i];
            let mut g = vec![0.0; 2 * d];
            let mut value = 0.0;
            for k in 0..d {
                let mu = out[k];
                let e = out[d + k].exp();
                let var = floors[k] + e;
                let r = t[k] - mu;
                value += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + r * r / (2.0 * var);
                g[k] = if precondition { -r } else { -r / var };
                g[d + k] = (0.5 / var - r * r / (2.0 * var * var)) * e;
            }
            (value, g)
        }
        _ => unreachable!("validated"),
    }
}

/// Weighted mean loss over the batch.
pub fn batch_loss(model: &Mlp, batch: &Batch, loss: &Loss) -> Result<f64> {
    validate(model, batch, loss)?;
    let mut total = 0.0;
    for (i, x) in batch.inputs.iter().enumerate() {
        let out = model.output_layer(&model.hidden_layer(x));
        total += batch.weight(i) * output_loss(&out, i, &batch.targets, loss, false).0;
    }
    Ok(total / batch.total_weight())
}

/// Exact gradient of [`batch_loss`] by backpropagation.
pub fn mlp_gradient(model: &Mlp, batch: &Batch, loss: &Loss) -> Result<MlpGradients> {
    validate(model, batch, loss)?;
    Ok(gradient_unchecked(model, batch, loss, false).1)
}

fn gradient_unchecked(model: &Mlp, batch: &Batch, loss: &Loss, precondition: bool) -> (f64, MlpGradients) {
    let mut g = MlpGradients::zeros_like(model);
    let total_w = batch.total_weight();
    let (n_in, n_h) = (model.input_dim, model.hidden);
    let mut total = 0.0;
    let mut g_pre = vec![0.0; n_h];
    for (i, x) in batch.inputs.iter().enumerate() {
        let w = batch.weight(i);
        if w == 0.0 {
            continue;
        }
        let h = model.hidden_layer(x);
        let out = model.output_layer(&h);
        let (value, g_out) = output_loss(&out, i, &batch.targets, loss, precondition);
        total += w * value;
        let scale = w / total_w;
        g_pre.iter_mut().for_each(|v| *v = 0.0);
        for (k, go) in g_out.iter().enumerate() {
            let go = go * scale;
            g.b2[k] += go;
            let row = k * n_h;
            for j in 0..n_h {
                g.w2[row + j] += go * h[j];
                g_pre[j] += go * model.w2[row + j];
            }
        }
        for j in 0..n_h {
            let d = g_pre[j] * (1.0 - h[j] * h[j]);
            g.b1[j] += d;
            let row = j * n_in;
            for (gw, xi) in g.w1[row..row + n_in].iter_mut().zip(x) {
                *gw += d * xi;
            }
        }
    }
    (total / total_w, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Gradient-norm clip applied per step; `0` disables clipping.
    pub clip_norm: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { hidden: 64, learning_rate: 0.1, epochs: 500, clip_norm: 5.0, variance_floor: 1e-4, seed: 0 }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 {
            return Err(Error::Config("hidden units and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.variance_floor > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("learning rate and variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// Full-batch gradient descent; returns the loss recorded before each step
/// followed by the final loss. Gaussian mean heads use variance-scaled
/// gradients (a diagonal Fisher preconditioner).
pub fn train(model: &mut Mlp, batch: &Batch, loss: &Loss, cfg: &TrainingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    validate(model, batch, loss)?;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (value, mut g) = gradient_unchecked(model, batch, loss, true);
        history.push(value);
        let norm = g.norm();
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for v in [&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2] {
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
        model.step(&g, cfg.learning_rate);
        if !model.is_finite() {
            return Err(Error::Degenerate("training diverged to non-finite parameters".into()));
        }
    }
    history.push(batch_loss(model, batch, loss)?);
    Ok(history)
}

fn row_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Rows of `(input, z label)` for fitting `p(z | y, a)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZTrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl ZTrainingSet {
    pub fn push(&mut self, input: Vec<f64>, label: impl Into<String>) {
        self.inputs.push(input);
        self.labels.push(label.into());
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Rows of `(input, feature vector)` for fitting `p(a | x, y)` or `p(a | x)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ATrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl ATrainingSet {
    pub fn push(&mut self, input: Vec<f64>, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn common_dim(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or(Error::Empty("posterior training set"))?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument(format!("{what} rows differ in dimension")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} contains non-finite values")));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZPosterior {
    pub model: Mlp,
    pub labels: Vec<String>,
    /// Set when the training data held a single label: predictions are a
    /// point mass on it and the model is flagged degenerate.
    pub constant: Option<usize>,
    pub loss_history: Vec<f64>,
}

impl ZPosterior {
    pub fn is_degenerate(&self) -> bool {
        self.constant.is_some()
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.model.check_input(input)?;
        if let Some(k) = self.constant {
            let mut p = vec![0.0; self.labels.len()];
            p[k] = 1.0;
            return Ok(p);
        }
        Ok(softmax(&self.model.forward(input)?))
    }

    pub fn entropy_at(&self, input: &[f64]) -> Result<f64> {
        Ok(entropy_of_probs(&self.predict(input)?))
    }
}

pub fn train_z_posterior(data: &ZTrainingSet, classes: &[String], cfg: &TrainingConfig) -> Result<ZPosterior> {
    cfg.validate()?;
    if classes.is_empty() {
        return Err(Error::Empty("z-posterior class set"));
    }
    if data.inputs.len() != data.labels.len() {
        return Err(Error::InvalidArgument("inputs and labels differ in length".into()));
    }
    let d = common_dim(&data.inputs, "z-posterior input")?;
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let ys = data
        .labels
        .iter()
        .map(|l| index.get(l.as_str()).copied().ok_or_else(|| Error::InvalidArgument(format!("label {l:?} outside the class set"))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Mlp::init(d, cfg.hidden, classes.len(), cfg.seed);
    let first = ys[0];
    if ys.iter().all(|&y| y == first) {
        log::warn!("z-posterior trained on a single label {:?}; using a constant model", classes[first]);
        model = Mlp::zeros(d, cfg.hidden, classes.len());
        return Ok(ZPosterior { model, labels: classes.to_vec(), constant: Some(first), loss_history: vec![] });
    }
    let mut merged: BTreeMap<(Vec<u64>, usize), (usize, f64)> = BTreeMap::new();
    for (i, (x, y)) in data.inputs.iter().zip(&ys).enumerate() {
        merged.entry((row_key(x), *y)).or_insert((i, 0.0)).1 += 1.0;
    }
    let mut rows: Vec<(usize, usize, f64)> = merged.into_iter().map(|((_, y), (i, w))| (i, y, w)).collect();
    rows.sort_by_key(|r| r.0);
    let batch = Batch {
        inputs: rows.iter().map(|r| data.inputs[r.0].clone()).collect(),
        targets: Targets::Labels(rows.iter().map(|r| r.1).collect()),
        weights: Some(rows.iter().map(|r| r.2).collect()),
    };
    let loss_history = train(&mut model, &batch, &Loss::CrossEntropy, cfg)?;
    Ok(ZPosterior { model, labels: classes.to_vec(), constant: None, loss_history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APosterior {
    pub model: Mlp,
    /// Per-feature standardization applied to targets during training.
    pub target_mean: Vec<f64>,
    pub target_scale: Vec<f64>,
    pub variance_floor: f64,
    pub loss_history: Vec<f64>,
}

impl APosterior {
    pub fn feature_dim(&self) -> usize {
        self.target_mean.len()
    }

    /// Predicted means and variances in the original feature units; every
    /// variance is at least the floor.
    pub fn predict(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.model.forward(input)?;
        let d = self.feature_dim();
        let means = (0..d).map(|k| self.target_mean[k] + self.target_scale[k] * out[k]).collect();
        let vars = (0..d)
            .map(|k| self.variance_floor + self.target_scale[k].powi(2) * out[d + k].exp())
            .collect();
        Ok((means, vars))
    }

    pub fn entropy_at(&self, input: &[f64]) -> Result<f64> {
        gaussian_entropy(&self.predict(input)?.1)
    }
}

pub fn train_a_posterior(data: &ATrainingSet, cfg: &TrainingConfig) -> Result<APosterior> {
    cfg.validate()?;
    if data.inputs.len() != data.targets.len() {
        return Err(Error::InvalidArgument("inputs and targets differ in length".into()));
    }
    let d_in = common_dim(&data.inputs, "a-posterior input")?;
    let d = common_dim(&data.targets, "a-posterior target")?;
    if d == 0 {
        return Err(Error::InvalidArgument("a-posterior targets are empty vectors".into()));
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| data.targets.iter().map(|t| t[k]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|k| {
            let var = data.targets.iter().map(|t| (t[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let mut merged: BTreeMap<(Vec<u64>, Vec<u64>), (usize, f64)> = BTreeMap::new();
    for (i, (x, t)) in data.inputs.iter().zip(&data.targets).enumerate() {
        merged.entry((row_key(x), row_key(t))).or_insert((i, 0.0)).1 += 1.0;
    }
    let mut rows: Vec<(usize, f64)> = merged.into_values().collect();
    rows.sort_by_key(|r| r.0);
    let standardized = |t: &[f64]| (0..d).map(|k| (t[k] - mean[k]) / scale[k]).collect::<Vec<_>>();
    let batch = Batch {
        inputs: rows.iter().map(|r| data.inputs[r.0].clone()).collect(),
        targets: Targets::Values(rows.iter().map(|r| standardized(&data.targets[r.0])).collect()),
        weights: Some(rows.iter().map(|r| r.1).collect()),
    };
    let floors = scale.iter().map(|s| cfg.variance_floor / (s * s)).collect();
    let mut model = Mlp::init(d_in, cfg.hidden, 2 * d, cfg.seed);
    let loss_history = train(&mut model, &batch, &Loss::GaussianNll { floors }, cfg)?;
    Ok(APosterior { model, target_mean: mean, target_scale: scale, variance_floor: cfg.variance_floor, loss_history })
}

/// Input for the z-posterior: `embed(y) ⊕ embed(a)`.
pub fn z_input(embedder: &dyn EmbeddingProvider, answer: &str, call_text: &str) -> Result<Vec<f64>> {
    let mut v = embedder.embed(answer)?;
    v.extend(embedder.embed(call_text)?);
    Ok(v)
}

/// Input for the a-posterior: `embed(x) ⊕ embed(y)`.
pub fn a_input(embedder: &dyn EmbeddingProvider, question: &str, answer: &str) -> Result<Vec<f64>> {
    let mut v = embedder.embed(question)?;
    v.extend(embedder.embed(answer)?);
    Ok(v)
}

/// Mean over answer samples of the entropy of `p(z | y_i, a)`.
pub fn posterior_entropy_z(
    post: &ZPosterior,
    embedder: &dyn EmbeddingProvider,
    call_text: &str,
    answers: &[ScoredSample],
) -> Result<f64> {
    let inputs = answers.iter().map(|y| z_input(embedder, &y.text, call_text)).collect::<Result<Vec<_>>>()?;
    mean_entropy_z(post, &inputs)
}

pub fn mean_entropy_z(post: &ZPosterior, inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("posterior inputs"));
    }
    let mut total = 0.0;
    for x in inputs {
        total += post.entropy_at(x)?;
    }
    Ok(total / inputs.len() as f64)
}

/// Mean over answer samples of the Gaussian entropy of `p(a | x, y_i)`.
pub fn posterior_entropy_a(
    post: &APosterior,
    embedder: &dyn EmbeddingProvider,
    question: &str,
    answers: &[ScoredSample],
) -> Result<f64> {
    let inputs = answers.iter().map(|y| a_input(embedder, question, &y.text)).collect::<Result<Vec<_>>>()?;
    mean_entropy_a(post, &inputs)
}

pub fn mean_entropy_a(post: &APosterior, inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Empty("posterior inputs"));
    }
    let mut total = 0.0;
    for x in inputs {
        total += post.entropy_at(x)?;
    }
    Ok(total / inputs.len() as f64)
}
