//! TOML run configuration. Command-line flags are applied on top by the
//! caller, so precedence is flags > file > defaults.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Ablation, HarnessError, PipelineConfig};
use crate::classify::{ClassifierHead, DecisionRule, TrainConfig};
use crate::decode::remote::{ChatCompletionsBackend, RemoteConfig};
use crate::decode::{Backend, BiasSpec, MockBackend, MockChatBackend, Vocabulary, DEFAULT_THRESHOLD};
use crate::ontology::Ontology;
use crate::prompt::PromptTemplate;
use crate::retrieve::{Encoder, NodeIndex, RetrievalConfig};

/// Environment variable read for the remote API key unless overridden.
pub const DEFAULT_API_KEY_ENV: &str = "ONTOGUIDE_API_KEY";

#[derive(Default, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Ontology file; the command line may supply it instead.
    pub ontology: Option<PathBuf>,
    pub retrieval: RetrievalConfig,
    pub bias: BiasSpec,
    pub prompt: PromptTemplate,
    pub decode: DecodeSettings,
    pub classifier: ClassifierSettings,
    pub ablation: Ablation,
    pub backend: BackendSettings,
    pub index: IndexSettings,
    pub eval: EvalSettings,
    pub train: TrainSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub threshold: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings { threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    /// Trained head file (JSON).
    pub head: Option<PathBuf>,
    /// Overrides the threshold stored in the head file.
    pub tau: Option<f64>,
    pub rule: Option<DecisionRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    MockChat,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub max_tokens: u32,
    /// `{"token": id}` vocabulary of the remote model, used for bias maps.
    pub vocab: Option<PathBuf>,
}

impl Default for BackendSettings {
    fn default() -> Self {
        BackendSettings {
            kind: BackendKind::Mock,
            url: None,
            model: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 30.0,
            retries: 2,
            max_in_flight: 8,
            max_tokens: 64,
            vocab: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    /// Precomputed node embeddings; built with the mock encoder when absent.
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { workers: 4, out_dir: PathBuf::from("reports") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings { learning_rate: d.learning_rate, epochs: d.epochs }
    }
}

/// A constructed backend together with the tokenizer its bias operates on.
pub struct Runtime {
    pub backend: Box<dyn Backend>,
    pub tokenizer: Vocabulary,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file when given, defaults otherwise. Relative ontology,
    /// head, sidecar and vocabulary paths are taken relative to the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, HarnessError> {
        let Some(p) = path else { return Ok(Config::default()) };
        let text =
            std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
        let mut cfg =
            Config::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
        let base = p.parent().unwrap_or(Path::new(""));
        for slot in [&mut cfg.ontology, &mut cfg.classifier.head, &mut cfg.index.sidecar, &mut cfg.backend.vocab] {
            if let Some(rel) = slot.as_ref().filter(|f| f.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.retrieval.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.bias.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = self.decode.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(HarnessError::Config(format!("decode threshold must be in [0, 1], got {t}")));
        }
        if let Some(tau) = self.classifier.tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(HarnessError::Config(format!("classifier tau must be in [0, 1], got {tau}")));
            }
        }
        if self.eval.workers == 0 {
            return Err(HarnessError::Config("eval workers must be at least 1".into()));
        }
        if !(self.backend.timeout_secs.is_finite() && self.backend.timeout_secs > 0.0) {
            return Err(HarnessError::Config("backend timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn load_head(&self) -> Result<Option<ClassifierHead>, HarnessError> {
        let Some(path) = &self.classifier.head else { return Ok(None) };
        let file = std::fs::File::open(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut head = ClassifierHead::load(file).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let Some(tau) = self.classifier.tau {
            head.tau = tau;
        }
        if let Some(rule) = self.classifier.rule {
            head.rule = rule;
        }
        Ok(Some(head))
    }

    /// Pipeline settings; the classifier head is attached only when the
    /// classifier switch is on.
    pub fn pipeline(&self) -> Result<PipelineConfig, HarnessError> {
        let head = if self.ablation.classifier { self.load_head()?.map(Arc::new) } else { None };
        if self.ablation.classifier && head.is_none() {
            return Err(HarnessError::Config("the classifier switch is on but no classifier head is configured".into()));
        }
        Ok(PipelineConfig {
            retrieval: self.retrieval,
            bias: self.bias,
            prompt: self.prompt.clone(),
            threshold: self.decode.threshold,
            classifier: head,
            ablation: self.ablation,
        })
    }

    /// Node index from the configured sidecar, or built with `enc`.
    pub fn node_index(&self, o: &Ontology, enc: &dyn Encoder) -> Result<NodeIndex, HarnessError> {
        let index = match &self.index.sidecar {
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
                NodeIndex::from_sidecar(o, file)
            }
            None => NodeIndex::build(o, enc),
        }
        .map_err(|e| HarnessError::Config(format!("node index: {e}")))?;
        if index.dimension() != enc.dimension() {
            return Err(HarnessError::Config(format!(
                "node index has dimension {}, encoder produces {}",
                index.dimension(),
                enc.dimension()
            )));
        }
        Ok(index)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: self.seed,
            tau: self.classifier.tau.unwrap_or(TrainConfig::default().tau),
        }
    }

    pub fn runtime(&self, o: &Ontology) -> Result<Runtime, HarnessError> {
        let b = &self.backend;
        match b.kind {
            BackendKind::Mock => {
                let backend = MockBackend::new(o, self.seed).with_max_in_flight(b.max_in_flight);
                let tokenizer = backend.vocabulary().clone();
                Ok(Runtime { backend: Box::new(backend), tokenizer })
            }
            BackendKind::MockChat => {
                let backend = MockChatBackend::new(o, self.seed);
                let tokenizer = backend.vocabulary().clone();
                Ok(Runtime { backend: Box::new(backend), tokenizer })
            }
            BackendKind::Remote => {
                let url = b.url.clone().ok_or_else(|| HarnessError::Config("remote backend needs `url`".into()))?;
                let model = b.model.clone().ok_or_else(|| HarnessError::Config("remote backend needs `model`".into()))?;
                let vocab_path =
                    b.vocab.as_ref().ok_or_else(|| HarnessError::Config("remote backend needs `vocab`".into()))?;
                let text = std::fs::read_to_string(vocab_path)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", vocab_path.display())))?;
                let tokenizer = Vocabulary::from_json(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", vocab_path.display())))?;
                let api_key = std::env::var(&b.api_key_env).ok().filter(|k| !k.is_empty());
                if api_key.is_none() {
                    log::warn!("environment variable {} is not set; sending requests without a key", b.api_key_env);
                }
                let backend = ChatCompletionsBackend::new(RemoteConfig {
                    url,
                    model,
                    api_key,
                    timeout: Duration::from_secs_f64(b.timeout_secs),
                    retries: b.retries,
                    max_in_flight: b.max_in_flight,
                    max_tokens: b.max_tokens,
                });
                Ok(Runtime { backend: Box::new(backend), tokenizer })
            }
        }
    }
}
