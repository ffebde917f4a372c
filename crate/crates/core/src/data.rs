//! Pairing corpus sentences with their hidden states.

use rayon::prelude::*;

use crate::embedding::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::treebank::{Corpus, Sentence};

#[derive(Clone, Debug)]
pub struct Example {
    pub sentence: Sentence,
    pub emb: EmbeddingMatrix,
}

/// Fetches states for every sentence at `layer`, listing all sentences that
/// have none.
pub fn fetch_examples(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    layer: usize,
) -> Result<Vec<Example>> {
    provider.check_layer(layer)?;
    let fetched: Vec<Result<EmbeddingMatrix>> = corpus
        .sentences
        .par_iter()
        .map(|s| provider.hidden_states(&s.id, &s.words, layer))
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(fetched.len());
    let mut dim = None;
    for (sentence, emb) in corpus.sentences.iter().zip(fetched) {
        match emb {
            Ok(emb) => {
                if emb.n_words() != sentence.n_words() {
                    return Err(Error::DimMismatch {
                        expected: sentence.n_words(),
                        found: emb.n_words(),
                    });
                }
                if *dim.get_or_insert(emb.dim()) != emb.dim() {
                    return Err(Error::DimMismatch {
                        expected: dim.unwrap_or_default(),
                        found: emb.dim(),
                    });
                }
                out.push(Example {
                    sentence: sentence.clone(),
                    emb,
                });
            }
            Err(Error::MissingEmbedding { id, .. }) => missing.push(id),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings { ids: missing, layer });
    }
    Ok(out)
}

pub fn embedding_dim(examples: &[Example]) -> Result<usize> {
    examples
        .first()
        .map(|e| e.emb.dim())
        .ok_or(Error::EmptyCorpus)
}
