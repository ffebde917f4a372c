//! NP/Z garden-path items: corpus schema, language-model surprisal
//! differences, probe surprisal of the disambiguating action, and
//! congruent/incongruent parse likelihoods.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, EmbeddingProvider, PlantedProvider};
use crate::error::{Error, Result};
use crate::probes::{sequence_nll, Memory, Probe, StepFilter};
use crate::stats::{bootstrap_ci, MeanCi};
use crate::transition::{execute, parse_codes, Action, ActionSequence, DependencyTree, ParseState};

/// Hand-built items shipped with the crate.
pub const FIXTURE_JSONL: &str = include_str!("../fixtures/npz.jsonl");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Continuation {
    Z,
    NP,
    Both,
    Neither,
}

impl Continuation {
    pub const ALL: [Continuation; 4] = [Continuation::Z, Continuation::NP, Continuation::Both, Continuation::Neither];
}

impl fmt::Display for Continuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The two readings of the ambiguous prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reading {
    Z,
    NP,
}

impl Reading {
    pub const ALL: [Reading; 2] = [Reading::Z, Reading::NP];

    pub fn continuation(self) -> Continuation {
        match self {
            Reading::Z => Continuation::Z,
            Reading::NP => Continuation::NP,
        }
    }

    pub fn other(self) -> Reading {
        match self {
            Reading::Z => Reading::NP,
            Reading::NP => Reading::Z,
        }
    }
}

impl fmt::Display for Reading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpzItem {
    pub id: String,
    /// Ambiguous prefix, ending in the noun phrase.
    pub prefix_transitive: Vec<String>,
    /// Same prefix with an intransitive verb.
    pub prefix_intransitive: Vec<String>,
    pub continuations: BTreeMap<Continuation, Vec<String>>,
    pub verb_index: usize,
    pub np_head_index: usize,
    /// Full action sequence over the transitive prefix plus the NP continuation.
    pub parse_np: String,
    /// Full action sequence over the transitive prefix plus the Z continuation.
    pub parse_z: String,
}

/// Where the two readings part ways.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    /// Index of the first differing action.
    pub index: usize,
    pub np_action: Action,
    pub z_action: Action,
}

impl NpzItem {
    pub fn continuation(&self, c: Continuation) -> &[String] {
        self.continuations.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Transitive prefix followed by the reading's continuation.
    pub fn sentence(&self, reading: Reading) -> Vec<String> {
        let mut words = self.prefix_transitive.clone();
        words.extend_from_slice(self.continuation(reading.continuation()));
        words
    }

    /// Store and provider id of [`NpzItem::sentence`].
    pub fn sentence_id(&self, reading: Reading) -> String {
        format!("{}:{}", self.id, reading.to_string().to_lowercase())
    }

    pub fn prefix_id(&self, transitive: bool) -> String {
        format!("{}:{}", self.id, if transitive { "transitive" } else { "intransitive" })
    }

    /// Every `(id, words)` pair the experiments ask a provider for.
    pub fn provider_sentences(&self) -> Vec<(String, Vec<String>)> {
        vec![
            (self.prefix_id(true), self.prefix_transitive.clone()),
            (self.prefix_id(false), self.prefix_intransitive.clone()),
            (self.sentence_id(Reading::Z), self.sentence(Reading::Z)),
            (self.sentence_id(Reading::NP), self.sentence(Reading::NP)),
        ]
    }

    pub fn actions(&self, reading: Reading) -> Result<Vec<Action>> {
        parse_codes(match reading {
            Reading::Z => &self.parse_z,
            Reading::NP => &self.parse_np,
        })
    }

    pub fn tree(&self, reading: Reading) -> Result<DependencyTree> {
        let words = self.sentence(reading);
        let tree = execute(&ActionSequence::new(words.len(), self.actions(reading)?))?;
        DependencyTree::new(tree.heads().to_vec(), words)
    }

    fn schema(&self, message: impl fmt::Display) -> Error {
        Error::Schema(format!("item `{}`: {message}", self.id))
    }

    /// Checks the documented structure and returns the divergence point.
    pub fn validate(&self) -> Result<Divergence> {
        let n = self.prefix_transitive.len();
        if n == 0 || self.prefix_intransitive.len() != n {
            return Err(self.schema("prefixes must be nonempty and of equal length"));
        }
        for c in Continuation::ALL {
            if self.continuation(c).is_empty() {
                return Err(self.schema(format!("missing {c} continuation")));
            }
        }
        if self.continuation(Continuation::Neither) != ["."] {
            return Err(self.schema("the Neither continuation must be a single period"));
        }
        if !(1..=n).contains(&self.verb_index) || !(self.verb_index + 1..=n).contains(&self.np_head_index) {
            return Err(self.schema("verb and noun-phrase head must lie in the prefix, verb first"));
        }
        let np_tree = self.tree(Reading::NP).map_err(|e| self.schema(format!("NP parse: {e}")))?;
        let z_tree = self.tree(Reading::Z).map_err(|e| self.schema(format!("Z parse: {e}")))?;
        if np_tree.head(self.np_head_index) != self.verb_index {
            return Err(self.schema("the NP parse must attach the noun-phrase head to the verb"));
        }
        if z_tree.head(self.np_head_index) == self.verb_index {
            return Err(self.schema("the Z parse must not attach the noun-phrase head to the verb"));
        }
        let np = self.actions(Reading::NP)?;
        let z = self.actions(Reading::Z)?;
        let index = np
            .iter()
            .zip(&z)
            .position(|(a, b)| a != b)
            .ok_or_else(|| self.schema("parses never diverge"))?;
        let state = ParseState::replay(n + 1, &np[..index])?;
        if state.generated() != n || state.s1() != self.np_head_index {
            return Err(self.schema(format!(
                "parses diverge at action {index} in state {}, not right after the noun phrase",
                state.summary()
            )));
        }
        Ok(Divergence {
            index,
            np_action: np[index],
            z_action: z[index],
        })
    }

    /// Shared actions before the divergence.
    pub fn shared_history(&self) -> Result<Vec<Action>> {
        let d = self.validate()?;
        Ok(self.actions(Reading::NP)?[..d.index].to_vec())
    }
}

pub fn parse_items(text: &str, origin: &Path) -> Result<Vec<NpzItem>> {
    let mut items = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: NpzItem = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        item.validate()?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::Schema(format!("{} holds no items", origin.display())));
    }
    Ok(items)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<NpzItem>> {
    let path = path.as_ref();
    parse_items(&fs::read_to_string(path)?, path)
}

pub fn fixture_items() -> Vec<NpzItem> {
    parse_items(FIXTURE_JSONL, Path::new("fixtures/npz.jsonl")).expect("shipped fixture is valid")
}

/// Planted states for every sentence the experiments request: each reading
/// is encoded from its own tree, the transitive prefix from the Z reading,
/// and the intransitive prefix from the Z tree over its own words.
pub fn planted_provider(items: &[NpzItem], dim: usize, seed: u64) -> Result<PlantedProvider> {
    let mut provider = PlantedProvider::new(dim, seed)?;
    for item in items {
        let z = item.tree(Reading::Z)?;
        let mut words = item.prefix_intransitive.clone();
        words.extend_from_slice(item.continuation(Continuation::Z));
        provider.register(&item.prefix_id(false), DependencyTree::new(z.heads().to_vec(), words)?);
        provider.register(&item.prefix_id(true), z.clone());
        provider.register(&item.sentence_id(Reading::Z), z);
        provider.register(&item.sentence_id(Reading::NP), item.tree(Reading::NP)?);
    }
    Ok(provider)
}

/// `S(c | intransitive prefix) − S(c | transitive prefix)` per continuation,
/// period included.
pub fn surprisal_difference(item: &NpzItem, provider: &dyn EmbeddingProvider) -> Result<BTreeMap<Continuation, f64>> {
    Continuation::ALL
        .iter()
        .map(|&c| {
            let cont = item.continuation(c);
            let unambiguous = provider.surprisal(&item.prefix_intransitive, cont)?.total;
            let ambiguous = provider.surprisal(&item.prefix_transitive, cont)?.total;
            Ok((c, unambiguous - ambiguous))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSurprisal {
    pub divergence: usize,
    /// The NP reading's action at the divergence.
    pub action: Action,
    pub transitive: f64,
    pub intransitive: f64,
    /// Intransitive minus transitive, nats.
    pub difference: f64,
}

fn state_at(probe: &dyn Probe, emb: &EmbeddingMatrix, n_words: usize, history: &[Action]) -> Result<(Memory, ParseState)> {
    let mut memory = probe.begin();
    let mut state = ParseState::initial(n_words)?;
    for &a in history {
        state = state.apply(a)?;
        memory = probe.advance(&memory, a);
    }
    debug_assert!(state.generated() <= emb.n_words());
    Ok((memory, state))
}

/// Probe surprisal of the NP reading's attachment decision under each prefix.
pub fn disambiguating_action_surprisal(
    item: &NpzItem,
    probe: &dyn Probe,
    provider: &dyn EmbeddingProvider,
    layer: usize,
) -> Result<ActionSurprisal> {
    let d = item.validate()?;
    let history = &item.actions(Reading::NP)?[..d.index];
    let surprisal = |transitive: bool| -> Result<f64> {
        let words = if transitive { &item.prefix_transitive } else { &item.prefix_intransitive };
        let emb = provider.hidden_states(&item.prefix_id(transitive), words, layer)?;
        // one word past the prefix keeps GEN a live alternative
        let (memory, state) = state_at(probe, &emb, words.len() + 1, history)?;
        Ok(-probe.log_dist(&memory, &state, &emb)?[d.np_action.index()])
    };
    let transitive = surprisal(true)?;
    let intransitive = surprisal(false)?;
    Ok(ActionSurprisal {
        divergence: d.index,
        action: d.np_action,
        transitive,
        intransitive,
        difference: intransitive - transitive,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseCongruence {
    pub congruent: f64,
    pub incongruent: f64,
    /// Incongruent minus congruent.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CongruenceTable {
    /// Continuation words covered by the scored window.
    pub window_words: usize,
    pub readings: BTreeMap<Reading, ParseCongruence>,
}

/// Number of leading actions scored for `reading`: everything before the
/// GEN of continuation word `window_words + 1`.
fn window_len(actions: &[Action], prefix_len: usize, window_words: usize) -> usize {
    let limit = prefix_len + window_words;
    let mut generated = 0;
    for (k, a) in actions.iter().enumerate() {
        if *a == Action::Gen {
            if generated == limit {
                return k;
            }
            generated += 1;
        }
    }
    actions.len()
}

/// Each parse scored over both suffixes. The parse is truncated to a window
/// ending one word before the shorter continuation runs out, so it stays
/// valid on either sentence.
pub fn congruence_nll(
    item: &NpzItem,
    probe: &dyn Probe,
    provider: &dyn EmbeddingProvider,
    layer: usize,
) -> Result<CongruenceTable> {
    item.validate()?;
    let prefix_len = item.prefix_transitive.len();
    let window_words = Reading::ALL
        .iter()
        .map(|r| item.continuation(r.continuation()).len())
        .min()
        .unwrap_or(1)
        - 1;
    let mut embs = BTreeMap::new();
    for r in Reading::ALL {
        embs.insert(r, provider.hidden_states(&item.sentence_id(r), &item.sentence(r), layer)?);
    }
    let mut readings = BTreeMap::new();
    for r in Reading::ALL {
        let actions = item.actions(r)?;
        let window = &actions[..window_len(&actions, prefix_len, window_words)];
        let score = |suffix: Reading| -> Result<f64> {
            let emb = &embs[&suffix];
            Ok(sequence_nll(probe, emb, emb.n_words(), window, StepFilter::All)?.value)
        };
        let congruent = score(r)?;
        let incongruent = score(r.other())?;
        readings.insert(
            r,
            ParseCongruence {
                congruent,
                incongruent,
                difference: incongruent - congruent,
            },
        );
    }
    Ok(CongruenceTable { window_words, readings })
}

/// Mean and bootstrap interval per key; keys with no finite values are omitted.
pub fn summarize<K: Ord + Copy>(rows: &[BTreeMap<K, f64>], resamples: usize, seed: u64) -> BTreeMap<K, MeanCi> {
    let mut columns: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for row in rows {
        for (&k, &v) in row {
            if v.is_finite() {
                columns.entry(k).or_default().push(v);
            }
        }
    }
    columns
        .into_iter()
        .filter_map(|(k, v)| bootstrap_ci(&v, resamples, seed).map(|ci| (k, ci)))
        .collect()
}
