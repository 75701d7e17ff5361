//! Language-model decoding with ontology logit bias.
//!
//! Backends that expose logits are run once per prompt; the biased logits are
//! turned into per-label scores (mean logit over the label's tokens) and a
//! softmax over the candidate labels selects every label above a threshold,
//! always keeping the argmax. Backends that only accept a sparse bias map get
//! the boosted label tokens and return text that is parsed back into intents.

mod backend;
mod bias;
mod parse;
pub mod remote;
mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{Backend, BackendCapability, MockBackend, MockChatBackend, MOCK_LOGIT_SCALE};
pub use bias::{
    apply_bias, bias_tokens, softmax, softmax_mass, BiasPlan, BiasScope, BiasSpec, LogitVector,
};
pub use parse::{parse_text_output, ParseOutcome};
pub use tokenizer::{TokenId, Tokenizer, Vocabulary, FILLER_TOKENS};

use crate::ontology::{Ontology, OntologyError};
use crate::prompt::Prompt;

/// At most this many label tokens go into a remote bias map.
pub const MAX_BIAS_MAP_TOKENS: usize = 32;

/// Accepted bias range of chat-completions style APIs.
pub const BIAS_MAP_LIMIT: f64 = 100.0;

/// Default probability threshold for label selection.
pub const DEFAULT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("tokenization failure: {0}")]
    Tokenization(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("logits contain non-finite values")]
    NonFiniteLogits,
    #[error("invalid bias: {0}")]
    InvalidBias(String),
    #[error("no candidate intents to decode")]
    NoCandidates,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("capability mismatch: {0}")]
    CapabilityMismatch(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// A `(domain, slot, value)` triple, trimmed and lowercased so that equality
/// is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "RawTriple", into = "RawTriple")]
pub struct SlotTriple {
    domain: String,
    slot: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct RawTriple(String, String, String);

impl From<RawTriple> for SlotTriple {
    fn from(RawTriple(d, s, v): RawTriple) -> Self {
        SlotTriple::new(d, s, v)
    }
}

impl From<SlotTriple> for RawTriple {
    fn from(t: SlotTriple) -> Self {
        RawTriple(t.domain, t.slot, t.value)
    }
}

impl SlotTriple {
    pub fn new(domain: impl AsRef<str>, slot: impl AsRef<str>, value: impl AsRef<str>) -> Self {
        let norm = |s: &str| s.trim().to_lowercase();
        SlotTriple { domain: norm(domain.as_ref()), slot: norm(slot.as_ref()), value: norm(value.as_ref()) }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn slot(&self) -> &str {
        &self.slot
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Classifier,
}

/// Predicted intents with their origin, plus predicted slot triples.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub intents: BTreeMap<String, Provenance>,
    pub slots: BTreeSet<SlotTriple>,
}

impl PredictionSet {
    pub fn generated<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        PredictionSet {
            intents: ids.into_iter().map(|id| (id.into(), Provenance::Generated)).collect(),
            slots: BTreeSet::new(),
        }
    }

    pub fn intent_ids(&self) -> BTreeSet<String> {
        self.intents.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty() && self.slots.is_empty()
    }
}

/// Per-candidate decoding scores, in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub intents: Vec<String>,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Label-scoring decoder: `score(v)` is the mean logit over the tokens of
/// the label of `v`; softmax over candidates; keep `p > threshold` plus the
/// argmax. Candidates are considered in (depth, id) order.
pub fn decode_intents<S: AsRef<str>>(
    logits: &LogitVector,
    candidates: &[S],
    o: &Ontology,
    tokenizer: &dyn Tokenizer,
    threshold: f64,
) -> Result<DecodeOutcome, DecodeError> {
    if candidates.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    let candidates = o.sort_by_depth(candidates)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for id in &candidates {
        let tokens = tokenizer.label_tokens(&o.node(id)?.label)?;
        let mut sum = 0.0;
        for &t in &tokens {
            sum += logits.get(t).ok_or(DecodeError::UnknownToken(t))?;
        }
        scores.push(sum / tokens.len() as f64);
    }
    let probabilities = softmax(&scores);
    let best = probabilities
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if *p > probabilities[best] { i } else { best });
    let intents = candidates
        .iter()
        .zip(&probabilities)
        .enumerate()
        .filter(|(i, (_, p))| *i == best || **p > threshold)
        .map(|(_, (id, _))| id.clone())
        .collect();
    Ok(DecodeOutcome { intents, candidates, scores, probabilities })
}

/// What `run_backend` needs besides the prompt.
pub struct DecodeContext<'a> {
    pub ontology: &'a Ontology,
    pub tokenizer: &'a dyn Tokenizer,
    /// Labels the decoder may choose from.
    pub candidates: &'a [String],
    /// Retrieved nodes whose label tokens are boosted.
    pub retrieved: &'a [String],
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendOutput {
    pub prediction: PredictionSet,
    /// Full-vocabulary softmax mass on the boosted tokens (logit backends only).
    pub bias_mass: Option<f64>,
    pub diagnostics: Vec<String>,
}

/// Sparse per-token bias for APIs that take a bias map: `beta` on the first
/// [`MAX_BIAS_MAP_TOKENS`] label tokens of the retrieved nodes in (depth, id)
/// order, clamped to the accepted range.
pub fn bias_map<S: AsRef<str>>(
    o: &Ontology,
    retrieved: &[S],
    tokenizer: &dyn Tokenizer,
    spec: &BiasSpec,
) -> Result<BTreeMap<TokenId, f64>, DecodeError> {
    spec.validate()?;
    let mut value = spec.beta;
    if value > BIAS_MAP_LIMIT {
        log::warn!("beta {value} exceeds the bias-map limit; clamping to {BIAS_MAP_LIMIT}");
        value = BIAS_MAP_LIMIT;
    }
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    for id in o.sort_by_depth(retrieved)? {
        for t in tokenizer.label_tokens(&o.node(&id)?.label)? {
            if !order.contains(&t) {
                order.push(t);
            }
        }
    }
    if order.len() > MAX_BIAS_MAP_TOKENS {
        log::debug!("bias map truncated from {} to {MAX_BIAS_MAP_TOKENS} tokens", order.len());
    }
    for t in order.into_iter().take(MAX_BIAS_MAP_TOKENS) {
        map.insert(t, value);
    }
    Ok(map)
}

/// Runs one prompt through `backend` and decodes a prediction set.
pub fn run_backend(
    prompt: &Prompt,
    backend: &dyn Backend,
    spec: &BiasSpec,
    ctx: &DecodeContext<'_>,
) -> Result<BackendOutput, DecodeError> {
    let caps = backend.capability();
    if caps.exposes_logits {
        let logits = backend.forward(prompt)?;
        let plan = BiasPlan::new(ctx.ontology, ctx.retrieved, ctx.tokenizer, spec.scope)?;
        let biased = apply_bias(&logits, &plan, spec)?;
        let outcome = decode_intents(&biased, ctx.candidates, ctx.ontology, ctx.tokenizer, ctx.threshold)?;
        let bias_mass = softmax_mass(&biased, &plan.boosted);
        Ok(BackendOutput {
            prediction: PredictionSet::generated(outcome.intents),
            bias_mass: Some(bias_mass),
            diagnostics: Vec::new(),
        })
    } else if caps.supports_bias_map {
        let map = bias_map(ctx.ontology, ctx.retrieved, ctx.tokenizer, spec)?;
        let text = backend.complete(prompt, &map)?;
        let ParseOutcome { prediction, diagnostics } = parse_text_output(&text, ctx.ontology);
        Ok(BackendOutput { prediction, bias_mass: None, diagnostics })
    } else {
        Err(DecodeError::CapabilityMismatch(format!(
            "backend `{}` neither exposes logits nor accepts a bias map",
            backend.name()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{build_prompt, PromptTemplate};

    const MOBILE: &str = include_str!("../../fixtures/mobile_intents.json");

    fn two_labels() -> (Ontology, Vocabulary) {
        let o = Ontology::from_json(
            r#"{"nodes":[{"id":"A","label":"Alpha"},{"id":"B","label":"Beta"},{"id":"C","label":"Gamma Delta"}]}"#,
        )
        .unwrap();
        let v = Vocabulary::from_tokens(["alpha", "beta", "gamma", "delta"]);
        (o, v)
    }

    #[test]
    fn single_candidate_always_returned() {
        let (o, v) = two_labels();
        let l = LogitVector::new(vec![-50.0, 0.0, 0.0, 0.0]).unwrap();
        let out = decode_intents(&l, &["A"], &o, &v, 0.99).unwrap();
        assert_eq!(out.intents, ["A"]);
    }

    #[test]
    fn peaked_scores_keep_only_the_winner() {
        let (o, v) = two_labels();
        let l = LogitVector::new(vec![10.0, -10.0, 0.0, 0.0]).unwrap();
        let out = decode_intents(&l, &["A", "B"], &o, &v, 0.4).unwrap();
        assert_eq!(out.intents, ["A"]);
    }

    #[test]
    fn multi_token_labels_use_mean_logit() {
        let (o, v) = two_labels();
        let l = LogitVector::new(vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let out = decode_intents(&l, &["A", "C"], &o, &v, 0.2).unwrap();
        assert_eq!(out.scores, vec![1.0, 1.0]);
        assert_eq!(out.intents, ["A", "C"]);
    }

    #[test]
    fn empty_candidates_rejected() {
        let (o, v) = two_labels();
        let l = LogitVector::new(vec![0.0; 4]).unwrap();
        let none: [&str; 0] = [];
        assert!(matches!(decode_intents(&l, &none, &o, &v, 0.2), Err(DecodeError::NoCandidates)));
    }

    // Independent re-computation: per-candidate mean, explicit exp/sum softmax.
    fn oracle(logits: &[f64], labels: &[Vec<usize>], threshold: f64) -> Vec<usize> {
        let scores: Vec<f64> =
            labels.iter().map(|t| t.iter().map(|&i| logits[i]).sum::<f64>() / t.len() as f64).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let probs: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        (0..probs.len()).filter(|&i| i == best || probs[i] > threshold).collect()
    }

    #[test]
    fn random_instances_match_exhaustive_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.clone());
        for trial in 0..500 {
            // five candidates named c0..c4 with 1-3 distinct tokens each
            let mut labels = Vec::new();
            let mut nodes = Vec::new();
            for c in 0..5 {
                let mut toks: Vec<usize> = Vec::new();
                while toks.len() < rng.random_range(1..=3) {
                    let t = rng.random_range(0..12);
                    if !toks.contains(&t) {
                        toks.push(t);
                    }
                }
                let label: Vec<&str> = toks.iter().map(|&t| words[t].as_str()).collect();
                nodes.push(format!(r#"{{"id":"c{c}","label":"{}"}}"#, label.join(" ")));
                labels.push(toks);
            }
            let o = Ontology::from_json(&format!(r#"{{"nodes":[{}]}}"#, nodes.join(","))).unwrap();
            let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
            let threshold = rng.random_range(0.05..0.5);
            let ids: Vec<String> = (0..5).map(|c| format!("c{c}")).collect();
            let got = decode_intents(&LogitVector::new(logits.clone()).unwrap(), &ids, &o, &vocab, threshold)
                .unwrap()
                .intents;
            let want: Vec<String> =
                oracle(&logits, &labels, threshold).into_iter().map(|i| format!("c{i}")).collect();
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn slot_triples_compare_case_insensitively() {
        assert_eq!(SlotTriple::new(" Hotel", "Area ", "CENTRE"), SlotTriple::new("hotel", "area", "centre"));
        let json = serde_json::to_string(&SlotTriple::new("a", "b", "c")).unwrap();
        assert_eq!(json, r#"["a","b","c"]"#);
    }

    #[test]
    fn neutral_bias_matches_unbiased_decoding() {
        let o = Ontology::from_json(MOBILE).unwrap();
        let backend = MockBackend::new(&o, 7);
        let retrieved = vec!["RestaurantOrder".to_string(), "OrderTracking".to_string(), "CancelOrder".to_string()];
        let prompt = build_prompt("order pizza and track my order", &retrieved, &o, &PromptTemplate::default())
            .unwrap();
        let ctx = DecodeContext {
            ontology: &o,
            tokenizer: backend.vocabulary(),
            candidates: &retrieved,
            retrieved: &retrieved,
            threshold: DEFAULT_THRESHOLD,
        };
        let out = run_backend(&prompt, &backend, &BiasSpec::neutral(), &ctx).unwrap();
        let raw = backend.forward(&prompt).unwrap();
        let direct = decode_intents(&raw, &retrieved, &o, backend.vocabulary(), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(out.prediction, PredictionSet::generated(direct.intents));
    }

    #[test]
    fn bias_map_caps_and_clamps() {
        let o = Ontology::from_json(MOBILE).unwrap();
        let vocab = Vocabulary::for_ontology(&o, FILLER_TOKENS);
        let all: Vec<String> = o.intent_nodes().map(|n| n.id.clone()).collect();
        let map = bias_map(&o, &all, &vocab, &BiasSpec::new(250.0, 0.0)).unwrap();
        assert_eq!(map.len(), MAX_BIAS_MAP_TOKENS);
        assert!(map.values().all(|&v| v == BIAS_MAP_LIMIT));

        let few = ["BookFlight".to_string()];
        let map = bias_map(&o, &few, &vocab, &BiasSpec::new(0.3, 0.2)).unwrap();
        let want: BTreeMap<TokenId, f64> =
            vocab.encode("Book Flight").unwrap().into_iter().map(|t| (t, 0.3)).collect();
        assert_eq!(map, want);
    }

    struct Mute;
    impl Backend for Mute {
        fn name(&self) -> &str {
            "mute"
        }
        fn capability(&self) -> BackendCapability {
            BackendCapability { exposes_logits: false, supports_bias_map: false, provides_pooled_state: false }
        }
    }

    #[test]
    fn backend_without_decode_path_is_a_capability_mismatch() {
        let o = Ontology::from_json(MOBILE).unwrap();
        let vocab = Vocabulary::for_ontology(&o, 0);
        let ids = vec!["BookFlight".to_string()];
        let prompt = build_prompt("fly", &ids, &o, &PromptTemplate::default()).unwrap();
        let ctx =
            DecodeContext { ontology: &o, tokenizer: &vocab, candidates: &ids, retrieved: &ids, threshold: 0.2 };
        let err = run_backend(&prompt, &Mute, &BiasSpec::default(), &ctx).unwrap_err();
        assert!(matches!(err, DecodeError::CapabilityMismatch(_)));
    }
}
