//! End-to-end orchestration: retrieval, prompting, biased decoding and the
//! optional classifier head, plus dataset evaluation, grid sweeps,
//! ablations and the deployment feasibility check.

pub mod config;
pub mod dataset;
pub mod feasibility;
mod sweep;
pub mod synth;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BackendKind, Config, Runtime};
pub use dataset::{DatasetError, DatasetRecord};
pub use feasibility::{feasibility, FeasibilityError, FeasibilityReport, FeasibilitySpec};
pub use sweep::{sweep, SweepOutcome, SweepRow, DEFAULT_GRID};

use crate::classify::{self, ClassifierHead, ClassifyError, Example, TrainConfig, TrainedHead};
use crate::decode::{
    run_backend, Backend, BiasSpec, DecodeContext, DecodeError, PredictionSet, Tokenizer,
};
use crate::metrics::{self, EvalInstance, EvalReport, MetricsError};
use crate::ontology::{Ontology, OntologyError};
use crate::prompt::{build_prompt, neutral_prompt, Prompt, PromptError, PromptTemplate};
use crate::retrieve::{retrieve, Encoder, NodeIndex, RetrievalConfig, RetrieveError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("retrieval stage: {0}")]
    Retrieve(#[source] RetrieveError),
    #[error("prompt stage: {0}")]
    Prompt(#[source] PromptError),
    #[error("decode stage: {0}")]
    Decode(#[source] DecodeError),
    #[error("classifier stage: {0}")]
    Classify(#[source] ClassifyError),
}

impl PipelineError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, PipelineError::Decode(DecodeError::BackendUnavailable(_)))
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("record `{record}`: {source}")]
    Pipeline { record: String, source: PipelineError },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, HarnessError::Pipeline { source, .. } if source.is_backend_failure())
    }
}

/// Component switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Retrieval plus ontology-augmented prompt (restricts the candidates).
    pub symbolic_integration: bool,
    /// Token-level bias towards retrieved labels.
    pub logit_biasing: bool,
    /// Union with the classifier head's predictions.
    pub classifier: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { symbolic_integration: true, logit_biasing: true, classifier: false }
    }
}

impl Ablation {
    pub const BASE: Ablation = Ablation { symbolic_integration: false, logit_biasing: false, classifier: false };
    pub const FULL: Ablation = Ablation { symbolic_integration: true, logit_biasing: true, classifier: true };

    /// The configurations of the ablation table, in table order.
    pub const TABLE: [(&'static str, Ablation); 5] = [
        ("base", Ablation::BASE),
        ("si", Ablation { symbolic_integration: true, logit_biasing: false, classifier: false }),
        ("lb", Ablation { symbolic_integration: false, logit_biasing: true, classifier: false }),
        ("si+lb", Ablation { symbolic_integration: true, logit_biasing: true, classifier: false }),
        ("full", Ablation::FULL),
    ];

    fn needs_retrieval(&self) -> bool {
        self.symbolic_integration || self.logit_biasing
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub bias: BiasSpec,
    pub prompt: PromptTemplate,
    pub threshold: f64,
    pub classifier: Option<Arc<ClassifierHead>>,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieval: RetrievalConfig::default(),
            bias: BiasSpec::default(),
            prompt: PromptTemplate::default(),
            threshold: crate::decode::DEFAULT_THRESHOLD,
            classifier: None,
            ablation: Ablation::default(),
        }
    }
}

/// Everything the pipeline reads but never mutates.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub ontology: &'a Ontology,
    pub index: &'a NodeIndex,
    pub encoder: &'a dyn Encoder,
    pub backend: &'a dyn Backend,
    pub tokenizer: &'a dyn Tokenizer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub retrieval_ms: f64,
    pub decode_ms: f64,
    pub classify_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub prediction: PredictionSet,
    /// Top-k hits with cosine scores (empty when retrieval is switched off).
    pub retrieved: Vec<(String, f64)>,
    pub subgraph: Vec<String>,
    pub prompt: Prompt,
    pub bias_mass: Option<f64>,
    pub diagnostics: Vec<String>,
    pub timing: StageTiming,
}

struct Prepared {
    prompt: Prompt,
    retrieved: Vec<(String, f64)>,
    subgraph: Vec<String>,
    retrieval_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine<'_> {
    fn prepare(&self, query: &str, cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
        let start = Instant::now();
        let (retrieved, subgraph) = if cfg.ablation.needs_retrieval() {
            let r = retrieve(self.ontology, self.index, query, self.encoder, &cfg.retrieval)
                .map_err(PipelineError::Retrieve)?;
            (r.scored, r.subgraph)
        } else {
            (Vec::new(), Vec::new())
        };
        let retrieval_ms = ms_since(start);
        // No hit above the threshold: fall back to the plain prompt.
        let prompt = if cfg.ablation.symbolic_integration && !subgraph.is_empty() {
            build_prompt(query, &subgraph, self.ontology, &cfg.prompt).map_err(PipelineError::Prompt)?
        } else {
            neutral_prompt(query)
        };
        Ok(Prepared { prompt, retrieved, subgraph, retrieval_ms })
    }

    pub fn run_pipeline(&self, query: &str, cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
        let Prepared { prompt, retrieved, subgraph, retrieval_ms } = self.prepare(query, cfg)?;
        let guided = cfg.ablation.symbolic_integration && !subgraph.is_empty();
        let candidates: Vec<String> = if guided {
            subgraph.clone()
        } else {
            self.ontology.intent_nodes().map(|n| n.id.clone()).collect()
        };
        let (boosted, spec): (&[String], BiasSpec) =
            if cfg.ablation.logit_biasing && !subgraph.is_empty() { (&subgraph, cfg.bias) } else { (&[], BiasSpec::neutral()) };

        let start = Instant::now();
        let ctx = DecodeContext {
            ontology: self.ontology,
            tokenizer: self.tokenizer,
            candidates: &candidates,
            retrieved: boosted,
            threshold: cfg.threshold,
        };
        let out = run_backend(&prompt, self.backend, &spec, &ctx).map_err(PipelineError::Decode)?;
        let decode_ms = ms_since(start);

        let start = Instant::now();
        let prediction = match (&cfg.ablation.classifier, &cfg.classifier) {
            (true, Some(head)) => {
                let pooled = self.backend.pooled_state(&prompt).map_err(PipelineError::Decode)?;
                let aux = head.classify(&pooled).map_err(PipelineError::Classify)?;
                classify::merge_predictions(&out.prediction, &aux)
            }
            _ => out.prediction,
        };
        let classify_ms = ms_since(start);

        Ok(PipelineOutput {
            prediction,
            retrieved,
            subgraph,
            prompt,
            bias_mass: out.bias_mass,
            diagnostics: out.diagnostics,
            timing: StageTiming { retrieval_ms, decode_ms, classify_ms },
        })
    }

    /// Pooled backend state of the prompt the pipeline would build.
    pub fn features(&self, query: &str, cfg: &PipelineConfig) -> Result<Vec<f64>, PipelineError> {
        let prepared = self.prepare(query, cfg)?;
        self.backend.pooled_state(&prepared.prompt).map_err(PipelineError::Decode)
    }
}

/// Per-record result kept alongside the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordOutcome {
    pub id: String,
    pub predicted: Vec<String>,
    pub bias_mass: Option<f64>,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub timing: StageTiming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub report: EvalReport,
    pub records: Vec<RecordOutcome>,
}

impl EvalRun {
    /// Mean softmax mass on boosted tokens over records that report one.
    pub fn mean_bias_mass(&self) -> Option<f64> {
        let masses: Vec<f64> = self.records.iter().filter_map(|r| r.bias_mass).collect();
        if masses.is_empty() {
            None
        } else {
            Some(masses.iter().sum::<f64>() / masses.len() as f64)
        }
    }
}

/// Runs `f` over `0..n` on at most `workers` threads; results come back in
/// index order. The first failing index (lowest) wins.
fn parallel_map<T, E, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T, E>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every index is processed"))
        .collect()
}

/// Runs the pipeline on every record and scores the predictions.
pub fn evaluate_records(
    engine: &Engine<'_>,
    records: &[DatasetRecord],
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<EvalRun, HarnessError> {
    if records.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    dataset::check_gold(engine.ontology, records)?;
    let workers = workers.min(engine.backend.max_in_flight()).max(1);
    let outputs = parallel_map(records.len(), workers, |i| {
        engine
            .run_pipeline(&records[i].query, cfg)
            .map_err(|source| HarnessError::Pipeline { record: records[i].id.clone(), source })
    })?;
    let mut instances = Vec::with_capacity(records.len());
    let mut outcomes = Vec::with_capacity(records.len());
    for (rec, out) in records.iter().zip(outputs) {
        outcomes.push(RecordOutcome {
            id: rec.id.clone(),
            predicted: out.prediction.intents.keys().cloned().collect(),
            bias_mass: out.bias_mass,
            diagnostics: out.diagnostics,
            timing: out.timing,
        });
        instances.push(EvalInstance {
            id: rec.id.clone(),
            prediction: out.prediction,
            gold_intents: rec.gold_set(),
            gold_slots: rec.slot_set(),
        });
    }
    let report = metrics::evaluate(engine.ontology, &instances)?;
    Ok(EvalRun { report, records: outcomes })
}

pub fn evaluate_dataset(
    engine: &Engine<'_>,
    path: impl AsRef<Path>,
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<EvalRun, HarnessError> {
    let records = dataset::ingest_dataset(path)?;
    evaluate_records(engine, &records, cfg, workers)
}

/// Named evaluation runs of the ablation table, in table order.
pub fn ablate(
    engine: &Engine<'_>,
    records: &[DatasetRecord],
    base: &PipelineConfig,
    workers: usize,
) -> Result<Vec<(String, EvalRun)>, HarnessError> {
    let mut out = Vec::new();
    for (name, ablation) in Ablation::TABLE {
        if ablation.classifier && base.classifier.is_none() {
            return Err(HarnessError::Config("the full configuration needs a classifier head".into()));
        }
        let cfg = PipelineConfig { ablation, ..base.clone() };
        out.push((name.to_string(), evaluate_records(engine, records, &cfg, workers)?));
    }
    Ok(out)
}

/// Pooled states of the prompts `cfg` builds, paired with gold intents.
pub fn training_examples(
    engine: &Engine<'_>,
    records: &[DatasetRecord],
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<Vec<Example>, HarnessError> {
    dataset::check_gold(engine.ontology, records)?;
    let features = parallel_map(records.len(), workers.max(1), |i| {
        engine
            .features(&records[i].query, cfg)
            .map_err(|source| HarnessError::Pipeline { record: records[i].id.clone(), source })
    })?;
    Ok(records
        .iter()
        .zip(features)
        .map(|(r, features)| Example { features, labels: r.gold_set() })
        .collect())
}

/// Trains a head over every non-root node on the prompts of `cfg`.
pub fn train_classifier(
    engine: &Engine<'_>,
    records: &[DatasetRecord],
    cfg: &PipelineConfig,
    train: &TrainConfig,
    workers: usize,
) -> Result<TrainedHead, HarnessError> {
    let examples = training_examples(engine, records, cfg, workers)?;
    let dimension = examples.first().map_or(0, |e| e.features.len());
    let nodes = engine.ontology.intent_nodes().map(|n| n.id.clone()).collect();
    Ok(classify::train_head(&examples, nodes, dimension, train)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub seed: u64,
    pub backend: String,
    pub dataset: String,
    pub ablation: Ablation,
    pub retrieval: RetrievalConfig,
    pub bias: BiasSpec,
    pub prompt_variant: String,
    pub threshold: f64,
}

impl ReportHeader {
    pub fn new(seed: u64, backend: &str, dataset: &str, cfg: &PipelineConfig) -> Self {
        ReportHeader {
            seed,
            backend: backend.to_string(),
            dataset: dataset.to_string(),
            ablation: cfg.ablation,
            retrieval: cfg.retrieval,
            bias: cfg.bias,
            prompt_variant: cfg.prompt.variant.name().to_string(),
            threshold: cfg.threshold,
        }
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    header: &'a ReportHeader,
    metrics: &'a EvalReport,
    records: &'a [RecordOutcome],
}

#[derive(Serialize)]
struct TimingRow<'a> {
    id: &'a str,
    #[serde(flatten)]
    timing: StageTiming,
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

/// Writes `<name>.json` (deterministic), `<name>.txt` (table) and
/// `<name>.timings.json` (wall-clock, varies between runs) into `dir`.
pub fn write_report(dir: &Path, name: &str, header: &ReportHeader, run: &EvalRun) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.display().to_string(), source })?;
    let json = serde_json::to_string_pretty(&ReportFile { header, metrics: &run.report, records: &run.records })
        .expect("report serializes");
    write_file(&dir.join(format!("{name}.json")), &(json + "\n"))?;
    let text = format!("seed: {}\n{}", header.seed, EvalReport::table(&[(name.to_string(), &run.report)]));
    write_file(&dir.join(format!("{name}.txt")), &text)?;
    let timings: Vec<TimingRow<'_>> =
        run.records.iter().map(|r| TimingRow { id: &r.id, timing: r.timing }).collect();
    write_file(
        &dir.join(format!("{name}.timings.json")),
        &(serde_json::to_string_pretty(&timings).expect("timings serialize") + "\n"),
    )
}

/// Intent sets of a run, in record order.
pub fn predicted_sets(run: &EvalRun) -> Vec<BTreeSet<String>> {
    run.records.iter().map(|r| r.predicted.iter().cloned().collect()).collect()
}
