//! Fixed probes used as fixtures and baselines.

use std::collections::BTreeMap;

use super::{Arch, Memory, Probe};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::transition::{oracle_step, DependencyTree, ParseState};
use crate::treebank::Corpus;

/// Puts all mass on the gold action of the sentence named by the embedding's
/// id. Off the gold path it is uniform over valid actions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleProbe {
    trees: BTreeMap<String, DependencyTree>,
}

impl OracleProbe {
    pub fn new() -> OracleProbe {
        OracleProbe::default()
    }

    pub fn from_corpus(corpus: &Corpus) -> OracleProbe {
        let mut probe = OracleProbe::new();
        for s in &corpus.sentences {
            probe.insert(&s.id, s.tree.clone());
        }
        probe
    }

    pub fn insert(&mut self, id: &str, tree: DependencyTree) {
        self.trees.insert(id.to_string(), tree);
    }

    pub fn trees(&self) -> &BTreeMap<String, DependencyTree> {
        &self.trees
    }
}

impl Probe for OracleProbe {
    fn arch(&self) -> Arch {
        Arch::Oracle
    }

    fn scores(&self, _memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        let tree = self.trees.get(&emb.sentence_id).ok_or_else(|| {
            Error::InvalidInput(format!("oracle probe has no tree for `{}`", emb.sentence_id))
        })?;
        if tree.n_words() != state.n_words() {
            return Err(Error::DimMismatch {
                expected: tree.n_words(),
                found: state.n_words(),
            });
        }
        Ok(match oracle_step(state, tree) {
            Some(action) if state.valid_actions().contains(action) => {
                let mut out = [f64::NEG_INFINITY; 3];
                out[action.index()] = 0.0;
                out
            }
            _ => [0.0; 3],
        })
    }
}

/// Equal scores for every action.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UniformProbe;

impl Probe for UniformProbe {
    fn arch(&self) -> Arch {
        Arch::Uniform
    }

    fn scores(&self, _memory: &Memory, _state: &ParseState, _emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        Ok([0.0; 3])
    }
}
