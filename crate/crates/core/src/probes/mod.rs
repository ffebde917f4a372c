//! Probes mapping a parse state and hidden states to a distribution over the
//! next action.
//!
//! Every probe produces three log-domain scores. The distribution used for
//! scoring and decoding is the log-softmax of those scores restricted to the
//! actions that are valid in the state.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Tensors};
use crate::transition::{Action, ActionSet, NodeId, ParseState, ROOT};

pub mod checkpoint;
mod gap;
mod map;
mod nap;
mod reference;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, LoadedProbe};
pub use gap::{GapConfig, GapProbe};
pub use map::{MapConfig, MapProbe};
pub use nap::{NapConfig, NapProbe};
pub use reference::{OracleProbe, UniformProbe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gap,
    Map,
    Nap,
    Oracle,
    Uniform,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Gap => "gap",
            Arch::Map => "map",
            Arch::Nap => "nap",
            Arch::Oracle => "oracle",
            Arch::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "gap" => Ok(Arch::Gap),
            "map" => Ok(Arch::Map),
            "nap" => Ok(Arch::Nap),
            "oracle" => Ok(Arch::Oracle),
            "uniform" => Ok(Arch::Uniform),
            other => Err(Error::InvalidInput(format!("unknown probe architecture `{other}`"))),
        }
    }
}

/// Probe-internal state carried along an action history. Only the recurrent
/// probe uses it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Memory(pub Option<Array1<f64>>);

pub trait Probe: Send + Sync {
    fn arch(&self) -> Arch;

    fn begin(&self) -> Memory {
        Memory::default()
    }

    fn advance(&self, memory: &Memory, _action: Action) -> Memory {
        memory.clone()
    }

    /// Unmasked log-domain scores in `Action::ALL` order. Only rows of
    /// generated words are read.
    fn scores(&self, memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]>;

    /// Log-probabilities over the valid actions; invalid actions get `-inf`.
    fn log_dist(&self, memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        let valid = state.valid_actions();
        if valid.len() <= 1 {
            return Ok(one_hot_log(valid));
        }
        Ok(masked_log_softmax(self.scores(memory, state, emb)?, valid))
    }
}

fn one_hot_log(valid: ActionSet) -> [f64; 3] {
    let mut out = [f64::NEG_INFINITY; 3];
    for a in valid.iter() {
        out[a.index()] = 0.0;
    }
    out
}

/// Log-softmax over `valid`; if every valid score is `-inf` the result is
/// uniform over `valid`.
pub fn masked_log_softmax(scores: [f64; 3], valid: ActionSet) -> [f64; 3] {
    let mut out = [f64::NEG_INFINITY; 3];
    let lse = log_sum_exp(valid.iter().map(|a| scores[a.index()]));
    if lse == f64::NEG_INFINITY {
        let uniform = -(valid.len() as f64).ln();
        for a in valid.iter() {
            out[a.index()] = uniform;
        }
        return out;
    }
    for a in valid.iter() {
        out[a.index()] = scores[a.index()] - lse;
    }
    out
}

/// `∂ log p(target) / ∂ score_b = 1[b = target] − p(b)` over valid `b`.
pub(crate) fn score_gradient(log_probs: &[f64; 3], valid: ActionSet, target: Action) -> [f64; 3] {
    let mut g = [0.0; 3];
    for b in valid.iter() {
        g[b.index()] = -log_probs[b.index()].exp();
    }
    g[target.index()] += 1.0;
    g
}

/// The row a stack node reads: ROOT's learned vector or the word's state.
pub(crate) fn node_vector<'a>(
    node: NodeId,
    emb: ArrayView2<'a, f64>,
    root: &'a Array1<f64>,
) -> Result<ArrayView1<'a, f64>> {
    if node == ROOT {
        Ok(root.view())
    } else if node <= emb.nrows() {
        Ok(emb.index_axis_move(ndarray::Axis(0), node - 1))
    } else {
        Err(Error::InvalidInput(format!(
            "probe needs the state of word {node} but only {} rows were given",
            emb.nrows()
        )))
    }
}

pub(crate) fn check_dim(emb: ArrayView2<f64>, dim: usize) -> Result<()> {
    if emb.ncols() == dim {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            expected: dim,
            found: emb.ncols(),
        })
    }
}

/// Result of a differentiable pass over part of an action sequence.
pub struct Backward {
    /// Sum of masked log-probabilities of the scored actions.
    pub log_likelihood: f64,
    /// Gradient of `log_likelihood` with respect to each hidden-state row.
    pub input: Array2<f64>,
}

/// Probes with analytic gradients.
pub trait Differentiable: Probe + Tensors + Clone {
    /// Scores `actions[k]` for every `k` in `steps`, each from the state
    /// reached by `actions[..k]` over a sentence of `n_words` words.
    /// Parameter gradients of the log-likelihood are added to `grads`.
    /// `noise` switches on training-time dropout.
    fn backward(
        &self,
        emb: ArrayView2<f64>,
        n_words: usize,
        actions: &[Action],
        steps: Range<usize>,
        noise: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Self>,
    ) -> Result<Backward>;

    /// Same parameters, all zero: an accumulator for `backward`.
    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        crate::nn::zero(&mut out);
        out
    }

    /// Keeps parameters in their valid domain after an update.
    fn project(&mut self) {}

    fn dropout(&self) -> f64 {
        0.0
    }
}

/// Replays `actions[..steps.end]`, collecting the states of scored steps that
/// have more than one valid action.
pub(crate) fn scored_states(
    n_words: usize,
    actions: &[Action],
    steps: &Range<usize>,
) -> Result<Vec<(usize, ParseState)>> {
    if steps.end > actions.len() || steps.start > steps.end {
        return Err(Error::InvalidInput(format!(
            "step range {steps:?} outside {} actions",
            actions.len()
        )));
    }
    let mut state = ParseState::initial(n_words)?;
    let mut out = Vec::new();
    for (k, &action) in actions[..steps.end].iter().enumerate() {
        let valid = state.valid_actions();
        if !valid.contains(action) {
            return Err(Error::InvalidAction {
                action,
                index: k,
                state: state.summary(),
            });
        }
        if k >= steps.start && valid.len() > 1 {
            out.push((k, state.clone()));
        }
        state.apply_mut(action).expect("checked above");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepFilter {
    /// Every action.
    #[default]
    All,
    /// Only actions taken where GEN, LEFT_ARC and RIGHT_ARC are all valid.
    FullyAmbiguous,
}

impl StepFilter {
    pub fn keeps(self, valid: ActionSet) -> bool {
        match self {
            StepFilter::All => true,
            StepFilter::FullyAmbiguous => valid.len() == 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    /// Nats; infinite when some action has zero probability.
    pub value: f64,
    /// Number of actions scored.
    pub actions: usize,
    /// First action with zero probability.
    pub zero_probability_at: Option<usize>,
}

/// Per-action log-probabilities of `actions` under `probe`.
pub fn action_log_probs(probe: &dyn Probe, emb: &EmbeddingMatrix, n_words: usize, actions: &[Action]) -> Result<Vec<(f64, ActionSet)>> {
    let mut state = ParseState::initial(n_words)?;
    let mut memory = probe.begin();
    let mut out = Vec::with_capacity(actions.len());
    for (k, &action) in actions.iter().enumerate() {
        let valid = state.valid_actions();
        if !valid.contains(action) {
            return Err(Error::InvalidAction {
                action,
                index: k,
                state: state.summary(),
            });
        }
        let lp = probe.log_dist(&memory, &state, emb)?[action.index()];
        out.push((lp, valid));
        memory = probe.advance(&memory, action);
        state.apply_mut(action).expect("checked above");
    }
    Ok(out)
}

/// Negative log-likelihood of an action sequence, GEN decisions included.
pub fn sequence_nll(probe: &dyn Probe, emb: &EmbeddingMatrix, n_words: usize, actions: &[Action], filter: StepFilter) -> Result<Nll> {
    let mut nll = Nll {
        value: 0.0,
        actions: 0,
        zero_probability_at: None,
    };
    for (k, (lp, valid)) in action_log_probs(probe, emb, n_words, actions)?.into_iter().enumerate() {
        if !filter.keeps(valid) {
            continue;
        }
        nll.actions += 1;
        nll.value -= lp;
        if lp == f64::NEG_INFINITY && nll.zero_probability_at.is_none() {
            nll.zero_probability_at = Some(k);
        }
    }
    Ok(nll)
}

/// What the input gradient differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Probability,
    LogProbability,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Objective> {
        match s {
            "prob" | "probability" => Ok(Objective::Probability),
            "logprob" | "log_probability" => Ok(Objective::LogProbability),
            other => Err(Error::InvalidInput(format!("unknown objective `{other}`"))),
        }
    }
}

/// Gradient of the target's probability (or log-probability) with respect to
/// the hidden-state rows. `history` leads to the state where `target` starts.
/// Returns the objective value and the gradient.
pub fn probe_input_gradient<P: Differentiable>(
    probe: &P,
    emb: ArrayView2<f64>,
    n_words: usize,
    history: &[Action],
    target: &[Action],
    objective: Objective,
) -> Result<(f64, Array2<f64>)> {
    if target.is_empty() {
        return Err(Error::NotDifferentiable("empty target".into()));
    }
    let mut actions = history.to_vec();
    actions.extend_from_slice(target);
    let steps = history.len()..actions.len();
    let pass = probe.backward(emb, n_words, &actions, steps, None, None).map_err(|e| match e {
        Error::InvalidAction { action, index, .. } if index >= history.len() => Error::NotDifferentiable(format!(
            "target action {action} at offset {} is masked out",
            index - history.len()
        )),
        other => other,
    })?;
    if pass.log_likelihood == f64::NEG_INFINITY {
        return Err(Error::NotDifferentiable("target has zero probability".into()));
    }
    Ok(match objective {
        Objective::LogProbability => (pass.log_likelihood, pass.input),
        Objective::Probability => {
            let p = pass.log_likelihood.exp();
            (p, pass.input * p)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::Action::{Gen as G, LeftArc as L, RightArc as R};
    use crate::probes::{GapConfig, MapConfig, NapConfig};

    #[test]
    fn masking_renormalises() {
        let valid: ActionSet = [G, R].into_iter().collect();
        let lp = masked_log_softmax([0.0, 5.0, 0.0], valid);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        assert!((lp[0].exp() - 0.5).abs() < 1e-15);
        let shifted = masked_log_softmax([3.0, 8.0, 3.0], valid);
        assert!(lp.iter().zip(&shifted).all(|(a, b)| a == b || (a - b).abs() < 1e-15));
        let dead = masked_log_softmax([f64::NEG_INFINITY; 3], ActionSet::FULL);
        assert!((dead[0] + 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn score_gradient_sums_to_zero() {
        let lp = masked_log_softmax([0.3, -1.0, 2.0], ActionSet::FULL);
        let g = score_gradient(&lp, ActionSet::FULL, L);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(g[1] > 0.0);
    }

    #[test]
    fn scored_states_skip_forced_steps() {
        let actions = [G, G, L, G, L, G, G, L, R, R];
        let states = scored_states(5, &actions, &(0..actions.len())).unwrap();
        let ks: Vec<usize> = states.iter().map(|(k, _)| *k).collect();
        // GEN is forced whenever the stack holds at most ROOT and one word
        assert_eq!(ks, vec![2, 4, 6, 7, 8]);
        assert!(scored_states(5, &[G, L], &(0..2)).is_err());
    }

    use rand::{Rng, SeedableRng};

    fn random_terminal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Action> {
        let mut state = ParseState::initial(n).unwrap();
        let mut out = Vec::new();
        while !state.is_terminal() {
            let valid: Vec<Action> = state.valid_actions().iter().collect();
            let a = valid[rng.random_range(0..valid.len())];
            state.apply_mut(a).unwrap();
            out.push(a);
        }
        out
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-10 {
            diff
        } else {
            diff / scale
        }
    }

    fn check<P: Differentiable>(probe: &P, dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..6);
        let emb = crate::nn::uniform_matrix(n, dim, 1.0, &mut rng);
        let actions = random_terminal(n, &mut rng);
        let steps = 0..actions.len();
        let ll = |p: &P, e: &Array2<f64>| p.backward(e.view(), n, &actions, steps.clone(), None, None).unwrap().log_likelihood;
        let mut grads = probe.zeros_like();
        let pass = probe.backward(emb.view(), n, &actions, steps.clone(), None, Some(&mut grads)).unwrap();
        let h = 1e-5;
        let base = crate::nn::flatten(probe);
        let mut fd = vec![0.0; base.len()];
        for k in 0..base.len() {
            let mut p = probe.clone();
            let mut v = base.clone();
            v[k] += h;
            crate::nn::unflatten(&mut p, &v);
            let up = ll(&p, &emb);
            v[k] -= 2.0 * h;
            crate::nn::unflatten(&mut p, &v);
            fd[k] = (up - ll(&p, &emb)) / (2.0 * h);
        }
        let err = relative_error(&crate::nn::flatten(&grads), &fd);
        assert!(err < 1e-4, "{:?} parameter gradient error {err}", probe.arch());
        let mut fd_in = Array2::zeros(emb.raw_dim());
        for idx in 0..emb.len() {
            let (r, c) = (idx / dim, idx % dim);
            let mut e = emb.clone();
            e[[r, c]] += h;
            let up = ll(probe, &e);
            e[[r, c]] -= 2.0 * h;
            fd_in[[r, c]] = (up - ll(probe, &e)) / (2.0 * h);
        }
        let err = relative_error(pass.input.as_slice().unwrap(), fd_in.as_slice().unwrap());
        assert!(err < 1e-4, "{:?} input gradient error {err}", probe.arch());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            let gap = GapProbe::new(5, &GapConfig { rank: Some(3), init_bound: 0.6, seed, ..GapConfig::default() }).unwrap();
            check(&gap, 5, seed);
            let map = MapProbe::new(4, &MapConfig { hidden: Some(6), features: Some(5), seed, ..MapConfig::default() });
            check(&map, 4, seed);
            let nap = NapProbe::new(4, &NapConfig { recurrent: 5, action_dim: 3, hidden: Some(6), features: Some(4), seed, ..NapConfig::default() });
            check(&nap, 4, seed);
        }
    }

    #[test]
    fn sequence_nll_of_uniform_probe() {
        let emb = EmbeddingMatrix::new("s", 0, "t", Array2::zeros((3, 2))).unwrap();
        let actions = [G, G, G, L, R, R];
        let nll = sequence_nll(&UniformProbe, &emb, 3, &actions, StepFilter::All).unwrap();
        // state [0,1,2,3] offers L,R only, [0,1,2] with one word left offers all three
        let expected = 3f64.ln() + 2f64.ln() + 2f64.ln();
        assert!((nll.value - expected).abs() < 1e-12);
        let ambiguous = sequence_nll(&UniformProbe, &emb, 3, &actions, StepFilter::FullyAmbiguous).unwrap();
        assert_eq!(ambiguous.actions, 1);
        assert!((ambiguous.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oracle_probe_scores_gold_with_certainty() {
        let tree = crate::transition::DependencyTree::from_heads(vec![2, 3, 0, 5, 3]).unwrap();
        let mut oracle = OracleProbe::new();
        oracle.insert("dog", tree.clone());
        let emb = EmbeddingMatrix::new("dog", 0, "t", Array2::zeros((5, 2))).unwrap();
        let gold = crate::transition::oracle(&tree).unwrap();
        let nll = sequence_nll(&oracle, &emb, 5, gold.actions(), StepFilter::All).unwrap();
        assert_eq!(nll.value, 0.0);
        let wrong = [G, G, R, G, L, G, G, L, R, R];
        let nll = sequence_nll(&oracle, &emb, 5, &wrong, StepFilter::All).unwrap();
        assert_eq!(nll.zero_probability_at, Some(2));
    }

    #[test]
    fn input_gradient_objectives() {
        let map = MapProbe::new(4, &MapConfig { hidden: Some(6), ..MapConfig::default() });
        let emb = crate::nn::uniform_matrix(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let history = [G, G, G];
        let (p, gp) = probe_input_gradient(&map, emb.view(), 4, &history, &[L], Objective::Probability).unwrap();
        let (lp, gl) = probe_input_gradient(&map, emb.view(), 4, &history, &[L], Objective::LogProbability).unwrap();
        assert!((p - lp.exp()).abs() < 1e-15);
        assert!((&gl * p - &gp).iter().all(|v| v.abs() < 1e-15));
        // rows other than s1 = 3 and s2 = 2 get nothing
        assert!(gp.row(0).iter().all(|&v| v == 0.0) && gp.row(3).iter().all(|&v| v == 0.0));
        assert!(matches!(
            probe_input_gradient(&map, emb.view(), 4, &[G], &[L], Objective::Probability),
            Err(Error::NotDifferentiable(_))
        ));
    }
}
