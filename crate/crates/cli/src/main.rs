use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ontoguide::classify::DecisionRule;
use ontoguide::decode::BiasScope;
use ontoguide::harness::dataset::ingest_dataset;
use ontoguide::harness::feasibility::{Device, ModelProfile};
use ontoguide::harness::{
    self, BackendKind, Config, Engine, EvalRun, HarnessError, ReportHeader, SweepRow, DEFAULT_GRID,
};
use ontoguide::metrics::EvalReport;
use ontoguide::ontology::{Expansion, Ontology};
use ontoguide::prompt::PromptVariant;
use ontoguide::retrieve::{MockEncoder, NodeIndex};

#[derive(Parser)]
#[command(name = "ontoguide", version, about = "Ontology-guided multi-intent recognition")]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Ontology JSON file (overrides the config)
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate an ontology file
    ValidateOntology { file: PathBuf },
    /// Embed every node with the mock encoder
    EmbedIndex {
        ontology: PathBuf,
        /// Write the embeddings sidecar here instead of stdout
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Show the retrieved subgraph for a query
    Retrieve {
        query: String,
        #[command(flatten)]
        over: Overrides,
    },
    /// Predict intents for one query
    Predict {
        query: String,
        #[command(flatten)]
        over: Overrides,
    },
    /// Evaluate a JSONL dataset and write reports
    Eval {
        dataset: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Grid search over beta and gamma
    Sweep {
        dataset: PathBuf,
        /// Beta values (comma separated); defaults to 0.0..0.5 step 0.1
        #[arg(long, value_delimiter = ',')]
        beta: Vec<f64>,
        /// Gamma values (comma separated); defaults to 0.0..0.5 step 0.1
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Evaluate the ablation configurations
    Ablate {
        dataset: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Check whether a model fits a device
    Feasibility {
        /// Device RAM in GB
        #[arg(long)]
        ram: f64,
        /// Device latency cap in ms
        #[arg(long)]
        latency: f64,
        /// Device energy cap in J
        #[arg(long)]
        energy: f64,
        /// Model size in GB
        #[arg(long)]
        model_size: f64,
        /// Model latency in ms
        #[arg(long)]
        model_latency: f64,
        /// Model energy per query in J
        #[arg(long)]
        model_energy: f64,
    },
    /// Train the classifier head on a JSONL dataset
    TrainHead {
        dataset: PathBuf,
        /// Output file for the trained head
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[command(flatten)]
        over: Overrides,
    },
}

/// Flags that override the configuration file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// none, parents, siblings or parents_siblings
    #[arg(long)]
    expansion: Option<Expansion>,
    #[arg(long = "bias-beta", id = "bias_beta")]
    beta: Option<f64>,
    #[arg(long = "bias-gamma", id = "bias_gamma")]
    gamma: Option<f64>,
    /// all_vocab or ontology_labels_only
    #[arg(long, value_parser = parse_scope)]
    scope: Option<BiasScope>,
    #[arg(long)]
    variant: Option<PromptVariant>,
    /// Worked example for the example_augmented variant
    #[arg(long)]
    example: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Classifier head file
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// sigmoid or softmax_single
    #[arg(long, value_parser = parse_rule)]
    rule: Option<DecisionRule>,
    /// Symbolic integration switch
    #[arg(long, action = clap::ArgAction::Set)]
    si: Option<bool>,
    /// Logit biasing switch
    #[arg(long, action = clap::ArgAction::Set)]
    lb: Option<bool>,
    /// Classifier switch
    #[arg(long, action = clap::ArgAction::Set)]
    clf: Option<bool>,
    /// mock, mock_chat or remote
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// `{"token": id}` vocabulary of the remote model
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Embeddings sidecar to load instead of embedding the ontology
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_snake<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value `{s}`"))
}

fn parse_scope(s: &str) -> Result<BiasScope, String> {
    parse_snake(s)
}

fn parse_rule(s: &str) -> Result<DecisionRule, String> {
    parse_snake(s)
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    parse_snake(s)
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.seed => cfg.seed);
        set!(self.k => cfg.retrieval.k);
        set!(self.theta => cfg.retrieval.theta);
        set!(self.expansion => cfg.retrieval.expansion);
        set!(self.beta => cfg.bias.beta);
        set!(self.gamma => cfg.bias.gamma);
        set!(self.scope => cfg.bias.scope);
        set!(self.variant => cfg.prompt.variant);
        set!(self.threshold => cfg.decode.threshold);
        set!(self.si => cfg.ablation.symbolic_integration);
        set!(self.lb => cfg.ablation.logit_biasing);
        set!(self.clf => cfg.ablation.classifier);
        set!(self.backend => cfg.backend.kind);
        set!(self.workers => cfg.eval.workers);
        set!(self.out_dir => cfg.eval.out_dir);
        if self.example.is_some() {
            cfg.prompt.example = self.example.clone();
        }
        if self.head.is_some() {
            cfg.classifier.head = self.head.clone();
            // naming a head on the command line implies using it
            if self.clf.is_none() {
                cfg.ablation.classifier = true;
            }
        }
        if self.tau.is_some() {
            cfg.classifier.tau = self.tau;
        }
        if self.rule.is_some() {
            cfg.classifier.rule = self.rule;
        }
        if self.url.is_some() {
            cfg.backend.url = self.url.clone();
        }
        if self.model.is_some() {
            cfg.backend.model = self.model.clone();
        }
        if self.vocab.is_some() {
            cfg.backend.vocab = self.vocab.clone();
        }
        if self.sidecar.is_some() {
            cfg.index.sidecar = self.sidecar.clone();
        }
    }
}

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Class {
    Usage = 1,
    Data = 2,
    Backend = 3,
}

struct Failure {
    class: Class,
    error: anyhow::Error,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let class = if e.is_backend_failure() { Class::Backend } else { Class::Data };
        Failure { class, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { class: Class::Data, error }
    }
}

type Outcome = Result<(), Failure>;

/// Loaded configuration, ontology, index and backend.
struct Session {
    cfg: Config,
    ontology: Ontology,
    index: NodeIndex,
    encoder: MockEncoder,
    runtime: harness::Runtime,
}

impl Session {
    fn open(cli: &Cli, over: &Overrides) -> Result<Self, Failure> {
        let mut cfg = Config::load(cli.config.as_deref())?;
        over.apply(&mut cfg);
        if cli.ontology.is_some() {
            cfg.ontology = cli.ontology.clone();
        }
        cfg.validate()?;
        let path = cfg.ontology.clone().ok_or_else(|| {
            Failure { class: Class::Usage, error: anyhow!("no ontology given (use --ontology or the `ontology` config key)") }
        })?;
        let ontology = Ontology::from_path(&path).map_err(HarnessError::from)?;
        let encoder = MockEncoder::default();
        let index = cfg.node_index(&ontology, &encoder)?;
        let runtime = cfg.runtime(&ontology)?;
        log::info!(
            "loaded {} nodes from {}; backend {}",
            ontology.intent_nodes().count(),
            path.display(),
            runtime.backend.name()
        );
        Ok(Session { cfg, ontology, index, encoder, runtime })
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            ontology: &self.ontology,
            index: &self.index,
            encoder: &self.encoder,
            backend: self.runtime.backend.as_ref(),
            tokenizer: &self.runtime.tokenizer,
        }
    }

    fn header(&self, dataset: &Path, pipeline: &harness::PipelineConfig) -> ReportHeader {
        ReportHeader::new(self.cfg.seed, self.runtime.backend.name(), &dataset.display().to_string(), pipeline)
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn validate_ontology(file: &Path) -> Outcome {
    let o = Ontology::from_path(file).map_err(HarnessError::from)?;
    let mut per_depth = BTreeMap::new();
    for n in o.intent_nodes() {
        *per_depth.entry(n.depth).or_insert(0usize) += 1;
    }
    print_json(&json!({
        "file": file.display().to_string(),
        "nodes": o.intent_nodes().count(),
        "max_depth": o.max_depth(),
        "nodes_per_depth": per_depth,
        "related_edges": o.related_edges().len(),
    }));
    Ok(())
}

fn embed_index(ontology: &Path, sidecar: Option<&Path>) -> Outcome {
    let o = Ontology::from_path(ontology).map_err(HarnessError::from)?;
    let index = NodeIndex::build(&o, &MockEncoder::default()).map_err(|e| anyhow!("embedding failed: {e}"))?;
    let text = index.to_sidecar();
    match sidecar {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} embeddings of dimension {} to {}", index.len(), index.dimension(), path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn retrieve(s: &Session, query: &str) -> Outcome {
    let r = ontoguide::retrieve::retrieve(&s.ontology, &s.index, query, &s.encoder, &s.cfg.retrieval)
        .map_err(|e| anyhow!("retrieval failed: {e}"))?;
    let scored: Vec<_> = r.scored.iter().map(|(id, sim)| json!({"id": id, "similarity": sim})).collect();
    print_json(&json!({"query": query, "scored": scored, "subgraph": r.subgraph}));
    Ok(())
}

fn predict(s: &Session, query: &str) -> Outcome {
    let cfg = s.cfg.pipeline()?;
    let out = s
        .engine()
        .run_pipeline(query, &cfg)
        .map_err(|source| HarnessError::Pipeline { record: "query".into(), source })?;
    let retrieved: Vec<_> = out.retrieved.iter().map(|(id, sim)| json!({"id": id, "similarity": sim})).collect();
    print_json(&json!({
        "query": query,
        "intents": out.prediction.intents,
        "slots": out.prediction.slots,
        "retrieved": retrieved,
        "subgraph": out.subgraph,
        "prompt": out.prompt.text,
        "bias_mass": out.bias_mass,
        "diagnostics": out.diagnostics,
        "timing_ms": out.timing,
    }));
    Ok(())
}

fn print_table(rows: &[(String, &EvalReport)], seed: u64) {
    println!("seed: {seed}");
    print!("{}", EvalReport::table(rows));
}

fn eval(s: &Session, dataset: &Path) -> Outcome {
    let cfg = s.cfg.pipeline()?;
    let run = harness::evaluate_dataset(&s.engine(), dataset, &cfg, s.cfg.eval.workers)?;
    harness::write_report(&s.cfg.eval.out_dir, "report", &s.header(dataset, &cfg), &run)?;
    print_table(&[("pipeline".to_string(), &run.report)], s.cfg.seed);
    eprintln!("reports written to {}", s.cfg.eval.out_dir.display());
    Ok(())
}

fn sweep(s: &Session, dataset: &Path, betas: &[f64], gammas: &[f64]) -> Outcome {
    let records = ingest_dataset(dataset).map_err(HarnessError::from)?;
    let cfg = s.cfg.pipeline()?;
    let betas = if betas.is_empty() { DEFAULT_GRID.to_vec() } else { betas.to_vec() };
    let gammas = if gammas.is_empty() { DEFAULT_GRID.to_vec() } else { gammas.to_vec() };
    let dir = &s.cfg.eval.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("sweep.csv");
    let mut csv = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(csv, "# seed: {}", s.cfg.seed).context("writing sweep table")?;
    writeln!(csv, "{}", SweepRow::CSV_HEADER).context("writing sweep table")?;
    println!("{}", SweepRow::CSV_HEADER);
    let mut write_err = None;
    let outcome = harness::sweep(&s.engine(), &records, &cfg, &betas, &gammas, s.cfg.eval.workers, |row| {
        println!("{}", row.csv());
        // flushed per row so a failing cell leaves a usable partial table
        if let Err(e) = writeln!(csv, "{}", row.csv()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", csv_path.display())).into());
    }
    match outcome.error {
        Some(e) => {
            eprintln!("sweep stopped after {} of {} cells", outcome.rows.len(), betas.len() * gammas.len());
            Err(e.into())
        }
        None => Ok(()),
    }
}

fn ablate(s: &Session, dataset: &Path) -> Outcome {
    let records = ingest_dataset(dataset).map_err(HarnessError::from)?;
    let mut base = s.cfg.clone();
    base.ablation.classifier = false;
    let mut cfg = base.pipeline()?;
    cfg.classifier = s.cfg.load_head()?.map(Arc::new);
    let runs: Vec<(String, EvalRun)> = harness::ablate(&s.engine(), &records, &cfg, s.cfg.eval.workers)?;
    for (name, run) in &runs {
        let named = harness::PipelineConfig { ablation: ablation_of(name), ..cfg.clone() };
        harness::write_report(&s.cfg.eval.out_dir, &format!("ablation-{name}"), &s.header(dataset, &named), run)?;
    }
    let rows: Vec<(String, &EvalReport)> = runs.iter().map(|(n, r)| (n.clone(), &r.report)).collect();
    print_table(&rows, s.cfg.seed);
    Ok(())
}

fn ablation_of(name: &str) -> harness::Ablation {
    harness::Ablation::TABLE.iter().find(|(n, _)| *n == name).map(|(_, a)| *a).expect("table name")
}

fn train_head(s: &Session, dataset: &Path, out: &Path) -> Outcome {
    let records = ingest_dataset(dataset).map_err(HarnessError::from)?;
    // features come from the prompts of the configured pipeline, with or without a head
    let mut cfg = s.cfg.clone();
    cfg.ablation.classifier = false;
    let pipeline = cfg.pipeline()?;
    let trained =
        harness::train_classifier(&s.engine(), &records, &pipeline, &s.cfg.train_config(), s.cfg.eval.workers)?;
    fs::write(out, trained.head.to_json()).with_context(|| format!("writing {}", out.display()))?;
    let meta = trained.head.training.as_ref().expect("trained heads carry metadata");
    eprintln!(
        "trained on {} examples, final loss {:.5} ({} rejected steps); wrote {}",
        meta.examples,
        meta.final_loss,
        meta.rejected_steps,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::ValidateOntology { file } => validate_ontology(file),
        Command::EmbedIndex { ontology, sidecar } => embed_index(ontology, sidecar.as_deref()),
        Command::Feasibility { ram, latency, energy, model_size, model_latency, model_energy } => {
            let spec = harness::FeasibilitySpec {
                device: Device { ram_gb: *ram, max_latency_ms: *latency, max_energy_j: *energy },
                model: ModelProfile { size_gb: *model_size, latency_ms: *model_latency, energy_j: *model_energy },
            };
            let report = harness::feasibility(&spec).map_err(|e| Failure { class: Class::Usage, error: e.into() })?;
            print_json(&serde_json::to_value(report).expect("report serializes"));
            Ok(())
        }
        Command::Retrieve { query, over } => retrieve(&Session::open(&cli, over)?, query),
        Command::Predict { query, over } => predict(&Session::open(&cli, over)?, query),
        Command::Eval { dataset, over } => eval(&Session::open(&cli, over)?, dataset),
        Command::Sweep { dataset, beta, gamma, over } => sweep(&Session::open(&cli, over)?, dataset, beta, gamma),
        Command::Ablate { dataset, over } => ablate(&Session::open(&cli, over)?, dataset),
        Command::TrainHead { dataset, out, epochs, learning_rate, over } => {
            let mut s = Session::open(&cli, over)?;
            if let Some(e) = epochs {
                s.cfg.train.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                s.cfg.train.learning_rate = *lr;
            }
            train_head(&s, dataset, out)
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Class::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { class, error }) => {
            eprintln!("error: {}", describe(&error));
            ExitCode::from(class as u8)
        }
    }
}
