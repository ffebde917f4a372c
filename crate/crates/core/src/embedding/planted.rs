use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::transition::{DependencyTree, ROOT};
use crate::treebank::Corpus;

pub const MIN_PLANTED_DIM: usize = 64;

/// Embeds a tree's metric in `R^dim`.
///
/// The edge into word `k` gets a random sign vector with entries `±1/√dim`,
/// drawn in word order from `seed`, and word `i` is the sum of the edge
/// vectors on its path from ROOT. Squared distances then concentrate around
/// tree distances and squared norms around depths. Because the vectors are
/// drawn in word order, sentences encoded with the same seed share the edge
/// vector of each dependent position.
pub fn planted_encoder(tree: &DependencyTree, dim: usize, seed: u64) -> Result<Array2<f64>> {
    if dim < MIN_PLANTED_DIM {
        return Err(Error::InvalidInput(format!(
            "planted encoder needs dim >= {MIN_PLANTED_DIM}, got {dim}"
        )));
    }
    let n = tree.n_words();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<Array1<f64>> = (0..n)
        .map(|_| {
            Array1::from_iter((0..dim).map(|_| if rng.random::<bool>() { scale } else { -scale }))
        })
        .collect();
    let mut out = Array2::zeros((n, dim));
    for word in 1..=n {
        let mut row = out.row_mut(word - 1);
        let mut node = word;
        while node != ROOT {
            row += &edges[node - 1];
            node = tree.head(node);
        }
    }
    Ok(out)
}

/// Offline provider that computes planted embeddings for registered trees.
///
/// Lookup is by sentence id first, then by word sequence. A word sequence that
/// is a prefix of a registered sentence gets that sentence's leading rows.
pub struct PlantedProvider {
    dim: usize,
    seed: u64,
    layers: Vec<usize>,
    model_tag: String,
    entries: Vec<(String, DependencyTree)>,
}

impl PlantedProvider {
    pub fn new(dim: usize, seed: u64) -> Result<PlantedProvider> {
        if dim < MIN_PLANTED_DIM {
            return Err(Error::InvalidInput(format!(
                "planted encoder needs dim >= {MIN_PLANTED_DIM}, got {dim}"
            )));
        }
        Ok(PlantedProvider {
            dim,
            seed,
            layers: vec![0],
            model_tag: format!("planted-d{dim}-s{seed}"),
            entries: Vec::new(),
        })
    }

    pub fn from_corpus(corpus: &Corpus, dim: usize, seed: u64) -> Result<PlantedProvider> {
        let mut provider = PlantedProvider::new(dim, seed)?;
        for s in &corpus.sentences {
            provider.register(&s.id, s.tree.clone());
        }
        Ok(provider)
    }

    /// Advertise these layers; every layer yields the same planted states.
    pub fn with_layers(mut self, layers: Vec<usize>) -> PlantedProvider {
        self.layers = layers;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, id: &str, tree: DependencyTree) {
        match self.entries.iter_mut().find(|(i, _)| i == id) {
            Some(entry) => entry.1 = tree,
            None => self.entries.push((id.to_string(), tree)),
        }
    }

    pub fn extend_from_corpus(&mut self, corpus: &Corpus) {
        for s in &corpus.sentences {
            self.register(&s.id, s.tree.clone());
        }
    }

    fn lookup(&self, id: &str, words: &[String]) -> Option<(&str, &DependencyTree, usize)> {
        if let Some((i, t)) = self.entries.iter().find(|(i, _)| i == id) {
            // a shorter word list asks for the leading rows only
            let rows = if words.is_empty() || words.len() > t.n_words() { t.n_words() } else { words.len() };
            return Some((i, t, rows));
        }
        if words.is_empty() {
            return None;
        }
        self.entries
            .iter()
            .find(|(_, t)| t.words() == words)
            .or_else(|| {
                self.entries
                    .iter()
                    .find(|(_, t)| t.words().len() >= words.len() && &t.words()[..words.len()] == words)
            })
            .map(|(i, t)| (i.as_str(), t, words.len()))
    }
}

impl EmbeddingProvider for PlantedProvider {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }

    fn layers(&self) -> Vec<usize> {
        self.layers.clone()
    }

    fn hidden_states(&self, id: &str, words: &[String], layer: usize) -> Result<EmbeddingMatrix> {
        self.check_layer(layer)?;
        let (found, tree, rows) = self.lookup(id, words).ok_or_else(|| Error::MissingEmbedding {
            id: id.to_string(),
            layer,
        })?;
        let full = planted_encoder(tree, self.dim, self.seed)?;
        let vectors = full.slice(ndarray::s![..rows, ..]).to_owned();
        let sentence_id = if found == id { id } else { found };
        EmbeddingMatrix::new(sentence_id, layer, self.model_tag.clone(), vectors)
    }
}
