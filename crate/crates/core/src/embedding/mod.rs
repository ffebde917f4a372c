//! Word-aligned hidden states and continuation surprisal.
//!
//! Three backends implement [`EmbeddingProvider`]: an on-disk [`EmbeddingStore`],
//! the synthetic [`PlantedProvider`] and the HTTP [`ServiceClient`]. A
//! [`StubLm`] can be layered over any backend to supply a closed-form language
//! model for offline experiments.

mod planted;
mod service;
mod store;
mod stub;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use planted::{planted_encoder, PlantedProvider};
pub use service::{decode_tensor, encode_tensor, Health, ServiceClient, WireTensor};
pub use store::{EmbeddingStore, StoreManifest, StoreSentence, StoreWriter, ALIGNMENT_RULE};
pub use stub::{StubLm, WithStubLm};
pub(crate) use store::{f32_bytes, read_f32s};

/// Hidden states of one sentence at one layer, one row per word.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub sentence_id: String,
    pub layer: usize,
    pub model_tag: String,
    vectors: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(
        sentence_id: impl Into<String>,
        layer: usize,
        model_tag: impl Into<String>,
        vectors: Array2<f64>,
    ) -> Result<EmbeddingMatrix> {
        if let Some(bad) = vectors.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding contains non-finite value {bad}"
            )));
        }
        Ok(EmbeddingMatrix {
            sentence_id: sentence_id.into(),
            layer,
            model_tag: model_tag.into(),
            vectors,
        })
    }

    pub fn n_words(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    /// Row of 1-based word `word`.
    pub fn word(&self, word: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(word - 1)
    }

    /// Same metadata, different vectors.
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Result<EmbeddingMatrix> {
        if vectors.dim() != self.vectors.dim() {
            return Err(Error::DimMismatch {
                expected: self.vectors.len(),
                found: vectors.len(),
            });
        }
        EmbeddingMatrix::new(
            self.sentence_id.clone(),
            self.layer,
            self.model_tag.clone(),
            vectors,
        )
    }

    /// The first `n` word rows, as seen by a causal model after `n` words.
    pub fn prefix(&self, n: usize) -> Result<EmbeddingMatrix> {
        if n > self.n_words() {
            return Err(Error::InvalidInput(format!(
                "prefix of {n} words requested from {} rows",
                self.n_words()
            )));
        }
        self.with_rows(self.vectors.slice(ndarray::s![..n, ..]).to_owned())
    }

    fn with_rows(&self, vectors: Array2<f64>) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            self.sentence_id.clone(),
            self.layer,
            self.model_tag.clone(),
            vectors,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurprisalResult {
    pub tokens: Vec<String>,
    /// Per-token surprisal in nats.
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl SurprisalResult {
    pub fn from_per_token(tokens: Vec<String>, per_token: Vec<f64>) -> Result<SurprisalResult> {
        if let Some(bad) = per_token.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid surprisal {bad}")));
        }
        let total = per_token.iter().sum();
        Ok(SurprisalResult {
            tokens,
            per_token,
            total,
        })
    }
}

pub(crate) fn require_continuation(continuation: &[String]) -> Result<()> {
    if continuation.is_empty() {
        Err(Error::InvalidInput("continuation must not be empty".into()))
    } else {
        Ok(())
    }
}

/// Source of word-aligned hidden states, optionally with a language model.
pub trait EmbeddingProvider: Send + Sync {
    fn model_tag(&self) -> &str;

    fn layers(&self) -> Vec<usize>;

    /// Hidden states of `words` at `layer`. `id` identifies the sentence for
    /// backends that look states up rather than compute them.
    fn hidden_states(&self, id: &str, words: &[String], layer: usize)
        -> Result<EmbeddingMatrix>;

    /// Surprisal of `continuation` given `prefix`, token by token.
    fn surprisal(&self, _prefix: &[String], _continuation: &[String]) -> Result<SurprisalResult> {
        Err(Error::Unsupported("continuation surprisal"))
    }

    /// Re-runs the model above `layer` from replaced prefix states and scores
    /// `continuation`.
    fn forward_from(
        &self,
        _layer: usize,
        _prefix: &[String],
        _states: &EmbeddingMatrix,
        _continuation: &[String],
    ) -> Result<SurprisalResult> {
        Err(Error::Unsupported("forward-from-layer"))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        let available = self.layers();
        if available.contains(&layer) {
            Ok(())
        } else {
            Err(Error::UnknownLayer { layer, available })
        }
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }

    fn layers(&self) -> Vec<usize> {
        (**self).layers()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        (**self).hidden_states(id, words, layer)
    }

    fn surprisal(&self, prefix: &[String], continuation: &[String]) -> Result<SurprisalResult> {
        (**self).surprisal(prefix, continuation)
    }

    fn forward_from(
        &self,
        layer: usize,
        prefix: &[String],
        states: &EmbeddingMatrix,
        continuation: &[String],
    ) -> Result<SurprisalResult> {
        (**self).forward_from(layer, prefix, states, continuation)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }

    fn layers(&self) -> Vec<usize> {
        (**self).layers()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        (**self).hidden_states(id, words, layer)
    }

    fn surprisal(&self, prefix: &[String], continuation: &[String]) -> Result<SurprisalResult> {
        (**self).surprisal(prefix, continuation)
    }

    fn forward_from(
        &self,
        layer: usize,
        prefix: &[String],
        states: &EmbeddingMatrix,
        continuation: &[String],
    ) -> Result<SurprisalResult> {
        (**self).forward_from(layer, prefix, states, continuation)
    }
}
