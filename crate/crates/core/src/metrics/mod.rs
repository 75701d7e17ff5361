//! Exact match, micro slot F1 and hierarchical intent similarity.

mod matching;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matching::max_weight_assignment;

use crate::decode::{PredictionSet, SlotTriple};
use crate::ontology::{Ontology, OntologyError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("the root `{0}` cannot be scored as an intent")]
    RootOperand(String),
    #[error("instance `{0}` has an empty gold intent set")]
    EmptyGold(String),
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub id: String,
    pub prediction: PredictionSet,
    pub gold_intents: BTreeSet<String>,
    pub gold_slots: BTreeSet<SlotTriple>,
}

pub fn exact_match(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> bool {
    pred == gold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Micro-averaged slot scores: counts pooled over every instance.
/// Ratios with a zero denominator are 0.
pub fn slot_f1(instances: &[EvalInstance]) -> SlotScores {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for inst in instances {
        let pred = &inst.prediction.slots;
        tp += pred.intersection(&inst.gold_slots).count();
        fp += pred.difference(&inst.gold_slots).count();
        fn_ += inst.gold_slots.difference(pred).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    SlotScores { precision, recall, f1, true_positives: tp, false_positives: fp, false_negatives: fn_ }
}

/// `2 * depth(lca(u, v)) / (depth(u) + depth(v))`.
pub fn sis(o: &Ontology, u: &str, v: &str) -> Result<f64> {
    for id in [u, v] {
        if o.is_root(id) {
            return Err(MetricsError::RootOperand(id.to_string()));
        }
    }
    let du = o.depth_of(u)?;
    let dv = o.depth_of(v)?;
    let dl = o.depth_of(o.lca(u, v)?)?;
    Ok(2.0 * dl as f64 / (du + dv) as f64)
}

/// Set-level SIS: best one-to-one matching of predicted to gold intents,
/// summed and divided by the larger set size. Unmatched intents score 0.
pub fn multi_sis(o: &Ontology, pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> Result<f64> {
    if gold.is_empty() {
        return Err(MetricsError::EmptyGold(String::new()));
    }
    let matrix = pred
        .iter()
        .map(|p| gold.iter().map(|g| sis(o, p, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let (total, _) = max_weight_assignment(&matrix);
    Ok(total / pred.len().max(gold.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub exact: bool,
    pub sis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub em: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub avg_sis: f64,
    pub per_instance: Vec<InstanceScore>,
}

pub fn evaluate(o: &Ontology, instances: &[EvalInstance]) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut per_instance = Vec::with_capacity(instances.len());
    for inst in instances {
        let pred = inst.prediction.intent_ids();
        let score = multi_sis(o, &pred, &inst.gold_intents).map_err(|e| match e {
            MetricsError::EmptyGold(_) => MetricsError::EmptyGold(inst.id.clone()),
            other => other,
        })?;
        per_instance.push(InstanceScore {
            id: inst.id.clone(),
            exact: exact_match(&pred, &inst.gold_intents),
            sis: score,
        });
    }
    let n = instances.len() as f64;
    let slots = slot_f1(instances);
    Ok(EvalReport {
        instances: instances.len(),
        em: per_instance.iter().filter(|s| s.exact).count() as f64 / n,
        slot_precision: slots.precision,
        slot_recall: slots.recall,
        slot_f1: slots.f1,
        avg_sis: per_instance.iter().map(|s| s.sis).sum::<f64>() / n,
        per_instance,
    })
}

impl EvalReport {
    /// Aligned plain-text table with EM, Slot-F1 and SIS columns.
    pub fn table(rows: &[(String, &EvalReport)]) -> String {
        let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max("System".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>6}", "System", "EM", "Slot-F1", "SIS");
        let _ = writeln!(out, "{}", "-".repeat(width + 28));
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.1}%  {:>6.1}%  {:>6.3}",
                name,
                100.0 * r.em,
                100.0 * r.slot_f1,
                r.avg_sis
            );
        }
        out
    }
}
