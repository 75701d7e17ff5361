use std::collections::HashMap;

use serde::Deserialize;

use super::DecodeError;
use crate::ontology::Ontology;
use crate::text::tokenize;

pub type TokenId = u32;

/// Number of filler tokens appended to an ontology vocabulary.
pub const FILLER_TOKENS: usize = 64;

pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, DecodeError>;

    fn token(&self, id: TokenId) -> Option<&str>;

    /// Every token id that can spell `label`, including the leading-space
    /// form for tokenizers that distinguish it. First-seen order, no repeats.
    fn label_tokens(&self, label: &str) -> Result<Vec<TokenId>, DecodeError> {
        let mut out = self.encode(label)?;
        for id in self.encode(&format!(" {label}"))? {
            if !out.contains(&id) {
                out.push(id);
            }
        }
        if out.is_empty() {
            return Err(DecodeError::Tokenization(format!("label `{label}` produced no tokens")));
        }
        Ok(out)
    }
}

/// Word-level vocabulary over lowercase alphanumeric tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: HashMap<TokenId, String>,
    ids: HashMap<String, TokenId>,
    size: usize,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary { tokens: HashMap::new(), ids: HashMap::new(), size: 0 };
        for t in tokens {
            let t = t.into();
            if !vocab.ids.contains_key(&t) {
                let id = vocab.size as TokenId;
                vocab.ids.insert(t.clone(), id);
                vocab.tokens.insert(id, t);
                vocab.size += 1;
            }
        }
        vocab
    }

    /// All label tokens of the ontology (sorted) followed by `fillers`
    /// filler tokens `filler00`, `filler01`, ...
    pub fn for_ontology(o: &Ontology, fillers: usize) -> Self {
        let mut words: Vec<String> = o.intent_nodes().flat_map(|n| tokenize(&n.label)).collect();
        words.sort();
        words.dedup();
        words.extend((0..fillers).map(|i| format!("filler{i:02}")));
        Vocabulary::from_tokens(words)
    }

    /// Reads a `{"token": id, ...}` map, e.g. for a remote model's tokenizer.
    pub fn from_json(text: &str) -> Result<Self, DecodeError> {
        #[derive(Deserialize)]
        struct File(HashMap<String, TokenId>);
        let File(map) = serde_json::from_str(text).map_err(|e| DecodeError::Tokenization(e.to_string()))?;
        let mut vocab = Vocabulary { tokens: HashMap::new(), ids: HashMap::new(), size: 0 };
        for (t, id) in map {
            let t = t.to_lowercase();
            if vocab.tokens.insert(id, t.clone()).is_some() {
                return Err(DecodeError::Tokenization(format!("token id {id} assigned twice")));
            }
            vocab.ids.insert(t, id);
            vocab.size = vocab.size.max(id as usize + 1);
        }
        Ok(vocab)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// Token strings by ascending id.
    pub fn entries(&self) -> Vec<(TokenId, &str)> {
        let mut v: Vec<_> = self.tokens.iter().map(|(&id, t)| (id, t.as_str())).collect();
        v.sort_unstable();
        v
    }
}

impl Tokenizer for Vocabulary {
    fn vocab_size(&self) -> usize {
        self.size
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, DecodeError> {
        tokenize(text)
            .into_iter()
            .map(|w| {
                self.id(&w)
                    .ok_or_else(|| DecodeError::Tokenization(format!("`{w}` is not in the vocabulary")))
            })
            .collect()
    }

    fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(&id).map(String::as_str)
    }
}
