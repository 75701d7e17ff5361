use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::bias::{softmax, LogitVector};
use super::tokenizer::{TokenId, Tokenizer, Vocabulary, FILLER_TOKENS};
use super::{DecodeError, DEFAULT_THRESHOLD};
use crate::ontology::Ontology;
use crate::prompt::Prompt;
use crate::retrieve::{Encoder, Embedding, MockEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackendCapability {
    pub exposes_logits: bool,
    pub supports_bias_map: bool,
    pub provides_pooled_state: bool,
}

/// A language-model backend.
///
/// Implementations override the methods matching their capability; the
/// defaults report a capability mismatch.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn capability(&self) -> BackendCapability;

    /// Upper bound on concurrent requests the engine may issue.
    fn max_in_flight(&self) -> usize {
        1
    }

    /// Next-token logits for the prompt.
    fn forward(&self, _prompt: &Prompt) -> Result<LogitVector, DecodeError> {
        Err(DecodeError::CapabilityMismatch(format!("backend `{}` does not expose logits", self.name())))
    }

    /// Pooled hidden representation of the prompt.
    fn pooled_state(&self, _prompt: &Prompt) -> Result<Vec<f64>, DecodeError> {
        Err(DecodeError::CapabilityMismatch(format!(
            "backend `{}` does not provide pooled states",
            self.name()
        )))
    }

    /// Text completion under a sparse token bias map.
    fn complete(&self, _prompt: &Prompt, _bias: &BTreeMap<TokenId, f64>) -> Result<String, DecodeError> {
        Err(DecodeError::CapabilityMismatch(format!("backend `{}` does not accept bias maps", self.name())))
    }
}

/// Scale applied to query/token cosine in the mock logits.
pub const MOCK_LOGIT_SCALE: f64 = 5.0;

/// Deterministic stand-in for a language model.
///
/// The vocabulary is every ontology label token followed by 64 filler
/// tokens. `logit(w) = 5 * cos(e_q, e_w) + u(seed, w)` where `e_q` is the
/// mock embedding of the query, `e_w` the mock vector of token `w`, and `u`
/// a fixed per-token uniform draw in [-0.5, 0.5].
pub struct MockBackend {
    vocab: Vocabulary,
    encoder: MockEncoder,
    token_vectors: Vec<Embedding>,
    noise: Vec<f64>,
    max_in_flight: usize,
}

impl MockBackend {
    pub fn new(o: &Ontology, seed: u64) -> Self {
        Self::with_vocabulary(Vocabulary::for_ontology(o, FILLER_TOKENS), seed)
    }

    pub fn with_vocabulary(vocab: Vocabulary, seed: u64) -> Self {
        let encoder = MockEncoder::default();
        let entries = vocab.entries();
        let token_vectors = entries
            .iter()
            .map(|(_, t)| Embedding::new(encoder.token_vector(t)).expect("unit vectors are finite"))
            .collect();
        let noise = entries.iter().map(|(_, t)| uniform_noise(seed, t)).collect();
        MockBackend { vocab, encoder, token_vectors, noise, max_in_flight: 8 }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Logits for an already-embedded query.
    pub fn logits_for(&self, query: &Embedding) -> LogitVector {
        let values = self
            .token_vectors
            .iter()
            .zip(&self.noise)
            .map(|(e, u)| {
                let cos = crate::retrieve::cosine(query, e).unwrap_or(0.0);
                MOCK_LOGIT_SCALE * cos + u
            })
            .collect();
        LogitVector::new(values).expect("mock logits are finite")
    }
}

fn uniform_noise(seed: u64, token: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(b"mock-logit-noise");
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn capability(&self) -> BackendCapability {
        BackendCapability { exposes_logits: true, supports_bias_map: false, provides_pooled_state: true }
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn forward(&self, prompt: &Prompt) -> Result<LogitVector, DecodeError> {
        let e = self
            .encoder
            .encode(&prompt.query)
            .map_err(|e| DecodeError::BackendUnavailable(format!("mock encoder: {e}")))?;
        Ok(self.logits_for(&e))
    }

    /// Mean of the mock token vectors of the whole prompt text.
    fn pooled_state(&self, prompt: &Prompt) -> Result<Vec<f64>, DecodeError> {
        self.encoder
            .mean_vector(&prompt.text)
            .ok_or_else(|| DecodeError::BackendUnavailable("empty prompt".into()))
    }
}

/// Chat-style mock: accepts only a bias map and answers with text naming
/// the prompt labels whose biased mean logit clears the default threshold.
pub struct MockChatBackend {
    inner: MockBackend,
}

impl MockChatBackend {
    pub fn new(o: &Ontology, seed: u64) -> Self {
        MockChatBackend { inner: MockBackend::new(o, seed) }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }
}

impl Backend for MockChatBackend {
    fn name(&self) -> &str {
        "mock-chat"
    }

    fn capability(&self) -> BackendCapability {
        BackendCapability { exposes_logits: false, supports_bias_map: true, provides_pooled_state: false }
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight
    }

    fn complete(&self, prompt: &Prompt, bias: &BTreeMap<TokenId, f64>) -> Result<String, DecodeError> {
        let mut logits = self.inner.forward(prompt)?.values().to_vec();
        for (&t, &b) in bias {
            *logits.get_mut(t as usize).ok_or(DecodeError::UnknownToken(t))? += b;
        }
        if prompt.labels.is_empty() {
            return Ok(String::new());
        }
        let mut scores = Vec::with_capacity(prompt.labels.len());
        for label in &prompt.labels {
            let tokens = self.inner.vocab.label_tokens(label)?;
            scores.push(tokens.iter().map(|&t| logits[t as usize]).sum::<f64>() / tokens.len() as f64);
        }
        let probs = softmax(&scores);
        let best = probs.iter().enumerate().fold(0, |b, (i, p)| if *p > probs[b] { i } else { b });
        let picked: Vec<&str> = prompt
            .labels
            .iter()
            .zip(&probs)
            .enumerate()
            .filter(|(i, (_, p))| *i == best || **p > DEFAULT_THRESHOLD)
            .map(|(_, (l, _))| l.as_str())
            .collect();
        Ok(picked.join("; "))
    }
}
