use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Embedding, RetrieveError};
use crate::text::tokenize;

/// Dimension of the deterministic mock embedding space.
pub const MOCK_DIM: usize = 64;

/// Text encoder producing fixed-dimension embeddings.
pub trait Encoder: Send + Sync {
    fn dimension(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Embedding, RetrieveError>;

    /// Whether `encode` may be called from several threads at once.
    fn supports_concurrent_calls(&self) -> bool {
        true
    }
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn encode(&self, text: &str) -> Result<Embedding, RetrieveError> {
        (**self).encode(text)
    }
    fn supports_concurrent_calls(&self) -> bool {
        (**self).supports_concurrent_calls()
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn encode(&self, text: &str) -> Result<Embedding, RetrieveError> {
        (**self).encode(text)
    }
    fn supports_concurrent_calls(&self) -> bool {
        (**self).supports_concurrent_calls()
    }
}

/// Serializes calls into an encoder that is not safe to call concurrently.
pub struct Serialized<E> {
    inner: E,
    gate: Mutex<()>,
}

impl<E: Encoder> Serialized<E> {
    pub fn new(inner: E) -> Self {
        Serialized { inner, gate: Mutex::new(()) }
    }
}

impl<E: Encoder> Encoder for Serialized<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn encode(&self, text: &str) -> Result<Embedding, RetrieveError> {
        if self.inner.supports_concurrent_calls() {
            return self.inner.encode(text);
        }
        let _guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.encode(text)
    }
}

/// Deterministic bag-of-tokens encoder.
///
/// Each lowercase token is hashed (SHA-256 of seed and token) into a ChaCha
/// stream that draws a Gaussian vector, normalized to unit length. A text is
/// the L2-normalized mean of its token vectors, repeats included.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEncoder {
    seed: u64,
}

impl MockEncoder {
    pub fn new(seed: u64) -> Self {
        MockEncoder { seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..MOCK_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Unnormalized mean of token vectors; `None` when the text has no tokens.
    pub fn mean_vector(&self, text: &str) -> Option<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; MOCK_DIM];
        for t in &tokens {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += x;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }
}

impl Encoder for MockEncoder {
    fn dimension(&self) -> usize {
        MOCK_DIM
    }

    fn encode(&self, text: &str) -> Result<Embedding, RetrieveError> {
        let mean = self.mean_vector(text).ok_or(RetrieveError::EmptyText)?;
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(RetrieveError::ZeroVector);
        }
        Embedding::new(mean.into_iter().map(|x| x / norm).collect())
    }
}
