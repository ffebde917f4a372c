//! Word-synchronous beam search over probe action distributions, an
//! exhaustive reference decoder, and attachment scoring.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::embedding::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::probes::{Memory, Probe, StepFilter};
use crate::trainer::action_perplexity;
use crate::transition::{codes, execute, Action, ActionSequence, ParseState};
use crate::treebank::Sentence;

pub const EXHAUSTIVE_MAX_WORDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub k_action: usize,
    pub k_word: usize,
    pub k_out: usize,
}

impl Default for BeamConfig {
    fn default() -> BeamConfig {
        BeamConfig {
            k_action: 10,
            k_word: 10,
            k_out: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub actions: Vec<Action>,
    pub state: ParseState,
    pub memory: Memory,
    /// Sum of masked log-probabilities, nats.
    pub score: f64,
}

/// Best first; equal scores fall back to the lexicographically smaller
/// action sequence under GEN < LEFT_ARC < RIGHT_ARC.
pub fn rank(a_score: f64, a: &[Action], b_score: f64, b: &[Action]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a.iter().map(|x| x.index()).cmp(b.iter().map(|x| x.index())))
}

fn sort_best_first(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| rank(a.score, &a.actions, b.score, &b.actions));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parse {
    pub actions: String,
    pub heads: Vec<usize>,
    pub logprob: f64,
}

impl Parse {
    fn from_actions(n_words: usize, actions: &[Action], logprob: f64) -> Result<Parse> {
        let tree = execute(&ActionSequence::new(n_words, actions.to_vec()))?;
        Ok(Parse {
            actions: codes(actions),
            heads: tree.heads().to_vec(),
            logprob,
        })
    }
}

fn extend(probe: &dyn Probe, hyp: &Hypothesis, emb: &EmbeddingMatrix) -> Result<Vec<Hypothesis>> {
    let valid = hyp.state.valid_actions();
    let log_probs = probe.log_dist(&hyp.memory, &hyp.state, emb)?;
    let mut out = Vec::with_capacity(valid.len());
    for action in valid.iter() {
        let mut state = hyp.state.clone();
        state.apply_mut(action).expect("valid action");
        let mut actions = hyp.actions.clone();
        actions.push(action);
        out.push(Hypothesis {
            actions,
            state,
            memory: probe.advance(&hyp.memory, action),
            score: hyp.score + log_probs[action.index()],
        });
    }
    Ok(out)
}

/// Extends `hyp` with reduce actions followed by GEN, or, when `to_end`, all
/// the way to a terminal state; keeps the best `width` completions.
fn inner_search(probe: &dyn Probe, hyp: Hypothesis, emb: &EmbeddingMatrix, width: usize, to_end: bool) -> Result<Vec<Hypothesis>> {
    let start_words = hyp.state.generated();
    let mut frontier = vec![hyp];
    let mut done = Vec::new();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for h in &frontier {
            for child in extend(probe, h, emb)? {
                let finished = if to_end {
                    child.state.is_terminal()
                } else {
                    child.state.generated() > start_words
                };
                if finished {
                    done.push(child);
                } else {
                    next.push(child);
                }
            }
        }
        sort_best_first(&mut next);
        next.truncate(width);
        frontier = next;
    }
    sort_best_first(&mut done);
    done.truncate(width);
    Ok(done)
}

/// Word-synchronous beam search. After each word the pool is cut to
/// `k_word`; after the last word up to `k_out` terminal parses are returned
/// best first.
pub fn decode(probe: &dyn Probe, emb: &EmbeddingMatrix, config: BeamConfig) -> Result<Vec<Parse>> {
    decode_observed(probe, emb, config, &mut |_, _| {})
}

/// [`decode`], calling `observe(word, pool)` on each pool just before it is
/// pruned to `k_word` (and on the final pool).
pub fn decode_observed(
    probe: &dyn Probe,
    emb: &EmbeddingMatrix,
    config: BeamConfig,
    observe: &mut dyn FnMut(usize, &[Hypothesis]),
) -> Result<Vec<Parse>> {
    if config.k_action == 0 || config.k_word == 0 || config.k_out == 0 {
        return Err(Error::InvalidInput("beam sizes must be at least 1".into()));
    }
    let n = emb.n_words();
    let mut beam = vec![Hypothesis {
        actions: Vec::new(),
        state: ParseState::initial(n)?,
        memory: probe.begin(),
        score: 0.0,
    }];
    let mut out = Vec::new();
    for word in 1..=n {
        let last = word == n;
        let width = if last { config.k_action.max(config.k_out) } else { config.k_action };
        let mut pool = Vec::new();
        for hyp in beam.drain(..) {
            pool.extend(inner_search(probe, hyp, emb, width, last)?);
        }
        sort_best_first(&mut pool);
        observe(word, &pool);
        if last {
            out = pool;
        } else {
            pool.truncate(config.k_word);
            beam = pool;
        }
    }
    out.retain(|h| !h.score.is_nan());
    if out.is_empty() {
        return Err(Error::DecodeFailure(format!("no terminal parse for `{}`", emb.sentence_id)));
    }
    out.truncate(config.k_out);
    out.iter()
        .map(|h| Parse::from_actions(n, &h.actions, h.score))
        .collect()
}

/// Fetches the sentence's states once and decodes.
pub fn decode_sentence(
    probe: &dyn Probe,
    provider: &dyn EmbeddingProvider,
    layer: usize,
    sentence: &Sentence,
    config: BeamConfig,
) -> Result<Vec<Parse>> {
    let emb = provider.hidden_states(&sentence.id, &sentence.words, layer)?;
    decode(probe, &emb, config)
}

/// Every terminal sequence with its log-probability, best first.
pub fn exhaustive_decode(probe: &dyn Probe, emb: &EmbeddingMatrix) -> Result<Vec<Parse>> {
    let n = emb.n_words();
    if n > EXHAUSTIVE_MAX_WORDS {
        return Err(Error::InvalidInput(format!(
            "exhaustive decoding is limited to {EXHAUSTIVE_MAX_WORDS} words, got {n}"
        )));
    }
    let mut found = Vec::new();
    let mut stack = vec![Hypothesis {
        actions: Vec::new(),
        state: ParseState::initial(n)?,
        memory: probe.begin(),
        score: 0.0,
    }];
    while let Some(h) = stack.pop() {
        if h.state.is_terminal() {
            found.push(h);
            continue;
        }
        stack.extend(extend(probe, &h, emb)?);
    }
    sort_best_first(&mut found);
    found
        .iter()
        .map(|h| Parse::from_actions(n, &h.actions, h.score))
        .collect()
}

/// Correct heads among non-punctuation words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadCounts {
    pub correct: usize,
    pub total: usize,
}

impl HeadCounts {
    pub fn fraction(self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

pub fn uas_counts(predicted: &[usize], gold: &Sentence) -> Result<HeadCounts> {
    if predicted.len() != gold.n_words() {
        return Err(Error::DimMismatch {
            expected: gold.n_words(),
            found: predicted.len(),
        });
    }
    let mut c = HeadCounts::default();
    for (i, &head) in predicted.iter().enumerate() {
        if gold.is_punct(i + 1) {
            continue;
        }
        c.total += 1;
        c.correct += usize::from(head == gold.tree.head(i + 1));
    }
    Ok(c)
}

pub fn uas(predicted: &[usize], gold: &Sentence) -> Result<Option<f64>> {
    Ok(uas_counts(predicted, gold)?.fraction())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParserReport {
    pub sentences: usize,
    pub decoded: usize,
    pub coverage: f64,
    /// Micro-averaged over non-punctuation words of decoded sentences.
    pub uas: Option<f64>,
    pub action_ppl: f64,
    pub failures: Vec<String>,
}

pub fn evaluate_parser(probe: &dyn Probe, examples: &[Example], config: BeamConfig) -> Result<ParserReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let decoded: Vec<Result<Vec<Parse>>> = examples.par_iter().map(|e| decode(probe, &e.emb, config)).collect();
    let mut counts = HeadCounts::default();
    let mut failures = Vec::new();
    for (e, parses) in examples.iter().zip(decoded) {
        match parses {
            Ok(p) => {
                let c = uas_counts(&p[0].heads, &e.sentence)?;
                counts.correct += c.correct;
                counts.total += c.total;
            }
            Err(Error::DecodeFailure(_)) => failures.push(e.sentence.id.clone()),
            Err(other) => return Err(other),
        }
    }
    let decoded = examples.len() - failures.len();
    Ok(ParserReport {
        sentences: examples.len(),
        decoded,
        coverage: decoded as f64 / examples.len() as f64,
        uas: counts.fraction(),
        action_ppl: action_perplexity(probe, examples, StepFilter::All)?,
        failures,
    })
}
