//! Probing autoregressive language models for incremental parse states.
//!
//! The crate is organised around an arc-standard style transition system with
//! a GEN action: [`transition`] defines states, actions and the oracle;
//! [`treebank`] reads CoNLL-U; [`embedding`] supplies per-word hidden states.

pub mod beam;
pub mod counterfactual;
pub mod data;
pub mod embedding;
pub mod error;
pub mod nn;
pub mod npz;
pub mod probes;
pub mod stats;
pub mod structural;
pub mod synth;
pub mod transition;
pub mod trainer;
pub mod treebank;

pub use embedding::{EmbeddingMatrix, EmbeddingProvider, SurprisalResult};
pub use error::{Error, Result};
pub use transition::{
    Action, ActionSequence, ActionSet, DependencyTree, NodeId, ParseState, ROOT,
};
pub use treebank::{Corpus, Sentence, Split};
