use super::{require_continuation, EmbeddingMatrix, EmbeddingProvider, SurprisalResult};
use crate::error::{Error, Result};

/// Closed-form language models for offline experiments.
#[derive(Clone, Debug, PartialEq)]
pub enum StubLm {
    /// Every token has probability `1 / vocab_size`.
    Uniform { vocab_size: usize },
    /// Every continuation token has surprisal `softplus(-scale · m)`, where `m`
    /// is the mean entry of the prefix states at `layer`.
    MeanActivation { layer: usize, scale: f64 },
}

impl StubLm {
    fn from_states(&self, states: Option<&EmbeddingMatrix>, continuation: &[String]) -> Result<SurprisalResult> {
        require_continuation(continuation)?;
        let per_token = match *self {
            StubLm::Uniform { vocab_size } => {
                vec![(vocab_size as f64).ln(); continuation.len()]
            }
            StubLm::MeanActivation { scale, .. } => {
                let states = states.ok_or(Error::Unsupported("mean-activation surprisal without states"))?;
                let mean = states.vectors().mean().unwrap_or(0.0);
                vec![softplus(-scale * mean); continuation.len()]
            }
        };
        SurprisalResult::from_per_token(continuation.to_vec(), per_token)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Wraps a provider and answers surprisal queries with a [`StubLm`].
pub struct WithStubLm<P> {
    inner: P,
    lm: StubLm,
}

impl<P: EmbeddingProvider> WithStubLm<P> {
    pub fn new(inner: P, lm: StubLm) -> WithStubLm<P> {
        WithStubLm { inner, lm }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for WithStubLm<P> {
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }

    fn layers(&self) -> Vec<usize> {
        self.inner.layers()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        self.inner.hidden_states(id, words, layer)
    }

    fn surprisal(&self, prefix: &[String], continuation: &[String]) -> Result<SurprisalResult> {
        match self.lm {
            StubLm::Uniform { .. } => self.lm.from_states(None, continuation),
            StubLm::MeanActivation { layer, .. } => {
                let states = self.inner.hidden_states(&prefix.join(" "), prefix, layer)?;
                self.lm.from_states(Some(&states), continuation)
            }
        }
    }

    fn forward_from(
        &self,
        layer: usize,
        prefix: &[String],
        states: &EmbeddingMatrix,
        continuation: &[String],
    ) -> Result<SurprisalResult> {
        self.check_layer(layer)?;
        if states.n_words() != prefix.len() {
            return Err(Error::DimMismatch {
                expected: prefix.len(),
                found: states.n_words(),
            });
        }
        if let StubLm::MeanActivation { layer: own, .. } = self.lm {
            if own != layer {
                return Err(Error::UnknownLayer {
                    layer,
                    available: vec![own],
                });
            }
        }
        self.lm.from_states(Some(states), continuation)
    }
}
