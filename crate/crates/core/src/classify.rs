//! Linear classifier head over pooled backend states.
//!
//! Per-node scores `s = W h + b` are squashed by a sigmoid and thresholded
//! at `tau`; training minimizes binary cross-entropy averaged over examples
//! and nodes with full-batch gradient descent. A step that would raise the
//! loss is rejected and the step size halved; accepted steps grow it by 5%.
//! The recorded loss history therefore never increases, and the step size
//! adapts to the scale of the features.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{PredictionSet, Provenance};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("dimension mismatch: head expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("gold label `{0}` is not a classifier node")]
    UnknownNode(String),
    #[error("invalid classifier head: {0}")]
    Invalid(String),
}

pub type Result<T, E = ClassifyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Independent per-node sigmoid, any number of nodes.
    #[default]
    Sigmoid,
    /// Softmax over nodes; at most the argmax is returned.
    SoftmaxSingle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub examples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierHead {
    pub node_order: Vec<String>,
    pub dimension: usize,
    /// Row-major `|nodes| x dimension`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub tau: f64,
    #[serde(default)]
    pub rule: DecisionRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMetadata>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl ClassifierHead {
    pub fn zeros(node_order: Vec<String>, dimension: usize, tau: f64) -> Self {
        let rows = node_order.len();
        ClassifierHead {
            node_order,
            dimension,
            weights: vec![0.0; rows * dimension],
            bias: vec![0.0; rows],
            tau,
            rule: DecisionRule::Sigmoid,
            training: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.node_order.len()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.rows();
        if self.weights.len() != rows * self.dimension || self.bias.len() != rows {
            return Err(ClassifyError::Invalid(format!(
                "{} weights and {} biases for {rows} nodes of dimension {}",
                self.weights.len(),
                self.bias.len(),
                self.dimension
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ClassifyError::Invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.weights.iter().chain(&self.bias).any(|x| !x.is_finite()) {
            return Err(ClassifyError::Invalid("non-finite parameters".into()));
        }
        let unique: BTreeSet<&String> = self.node_order.iter().collect();
        if unique.len() != rows {
            return Err(ClassifyError::Invalid("duplicate node in node_order".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let head: ClassifierHead =
            serde_json::from_str(text).map_err(|e| ClassifyError::Invalid(e.to_string()))?;
        head.validate()?;
        Ok(head)
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut text = String::new();
        source.read_to_string(&mut text).map_err(|e| ClassifyError::Invalid(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("head serializes")
    }

    /// Raw scores `W h + b`.
    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dimension {
            return Err(ClassifyError::DimensionMismatch { expected: self.dimension, found: h.len() });
        }
        Ok(self
            .weights
            .chunks_exact(self.dimension.max(1))
            .take(self.rows())
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// Nodes whose decision probability exceeds `tau`, in `node_order`.
    pub fn classify(&self, h: &[f64]) -> Result<Vec<String>> {
        let s = self.scores(h)?;
        let picked = match self.rule {
            DecisionRule::Sigmoid => self
                .node_order
                .iter()
                .zip(&s)
                .filter(|(_, &si)| sigmoid(si) > self.tau)
                .map(|(id, _)| id.clone())
                .collect(),
            DecisionRule::SoftmaxSingle => {
                let probs = crate::decode::softmax(&s);
                probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .filter(|(_, &p)| p > self.tau)
                    .map(|(i, _)| vec![self.node_order[i].clone()])
                    .unwrap_or_default()
            }
        };
        Ok(picked)
    }
}

/// One training example: pooled state and its gold node set.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub labels: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 50.0, epochs: 1000, seed: 0, tau: 0.5 }
    }
}

const STEP_GROWTH: f64 = 1.05;

/// Dense targets aligned with `node_order`.
struct Batch<'a> {
    features: Vec<&'a [f64]>,
    targets: Vec<Vec<f64>>,
}

fn make_batch<'a>(head: &ClassifierHead, data: &'a [Example]) -> Result<Batch<'a>> {
    let pos: HashMap<&str, usize> = head.node_order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut features = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for ex in data {
        if ex.features.len() != head.dimension {
            return Err(ClassifyError::DimensionMismatch { expected: head.dimension, found: ex.features.len() });
        }
        let mut y = vec![0.0; head.rows()];
        for l in &ex.labels {
            let &i = pos.get(l.as_str()).ok_or_else(|| ClassifyError::UnknownNode(l.clone()))?;
            y[i] = 1.0;
        }
        features.push(ex.features.as_slice());
        targets.push(y);
    }
    Ok(Batch { features, targets })
}

fn batch_loss(head: &ClassifierHead, batch: &Batch<'_>) -> Result<f64> {
    let mut total = 0.0;
    for (h, y) in batch.features.iter().zip(&batch.targets) {
        for (s, t) in head.scores(h)?.into_iter().zip(y) {
            total += softplus(s) - t * s;
        }
    }
    Ok(total / (batch.features.len() * head.rows()).max(1) as f64)
}

fn batch_gradient(head: &ClassifierHead, batch: &Batch<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = head.dimension;
    let mut gw = vec![0.0; head.weights.len()];
    let mut gb = vec![0.0; head.rows()];
    let scale = 1.0 / (batch.features.len() * head.rows()).max(1) as f64;
    for (h, y) in batch.features.iter().zip(&batch.targets) {
        for (i, (s, t)) in head.scores(h)?.into_iter().zip(y).enumerate() {
            let r = (sigmoid(s) - t) * scale;
            gb[i] += r;
            for (g, x) in gw[i * d..(i + 1) * d].iter_mut().zip(h.iter()) {
                *g += r * x;
            }
        }
    }
    Ok((gw, gb))
}

/// Mean binary cross-entropy of `head` on `data`.
pub fn bce_loss(head: &ClassifierHead, data: &[Example]) -> Result<f64> {
    batch_loss(head, &make_batch(head, data)?)
}

/// Analytic gradient of [`bce_loss`] with respect to weights and bias.
pub fn bce_gradient(head: &ClassifierHead, data: &[Example]) -> Result<(Vec<f64>, Vec<f64>)> {
    batch_gradient(head, &make_batch(head, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: ClassifierHead,
    /// Loss before training followed by the loss after each accepted step.
    pub loss_history: Vec<f64>,
}

/// Fits a zero-initialized head. The seed only fixes the order in which
/// examples are summed.
pub fn train_head(
    data: &[Example],
    node_order: Vec<String>,
    dimension: usize,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    if data.is_empty() {
        return Err(ClassifyError::EmptyDataset);
    }
    let mut head = ClassifierHead::zeros(node_order, dimension, cfg.tau);
    head.validate()?;
    let mut shuffled: Vec<Example> = data.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let batch = make_batch(&head, &shuffled)?;

    let mut lr = cfg.learning_rate;
    let mut loss = batch_loss(&head, &batch)?;
    let mut history = vec![loss];
    let mut rejected = 0;
    for epoch in 0..cfg.epochs {
        let (gw, gb) = batch_gradient(&head, &batch)?;
        let mut candidate = head.clone();
        candidate.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        candidate.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
        let next = batch_loss(&candidate, &batch)?;
        if !next.is_finite() || candidate.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifyError::Divergence { epoch });
        }
        if next <= loss {
            head = candidate;
            loss = next;
            history.push(loss);
            lr *= STEP_GROWTH;
        } else {
            rejected += 1;
            lr *= 0.5;
        }
    }
    head.training = Some(TrainingMetadata {
        examples: data.len(),
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        final_loss: loss,
        rejected_steps: rejected,
    });
    Ok(TrainedHead { head, loss_history: history })
}

/// Micro-averaged F1 over multi-label decisions.
pub fn micro_f1(pred: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        tp += p.intersection(g).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Union of generated and classifier intents. Intents present in both keep
/// the generated tag; slots come from the generated set.
pub fn merge_predictions<S: AsRef<str>>(gen: &PredictionSet, aux: &[S]) -> PredictionSet {
    let mut intents: BTreeMap<String, Provenance> = gen.intents.clone();
    for id in aux {
        intents.entry(id.as_ref().to_string()).or_insert(Provenance::Classifier);
    }
    PredictionSet { intents, slots: gen.slots.clone() }
}
