use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::map::{action_logits, mlp_backward, mlp_forward};
use super::{check_dim, masked_log_softmax, score_gradient, scored_states, Arch, Backward, Differentiable, Memory, Probe};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, Linear, Tensors};
use crate::transition::{Action, ParseState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NapConfig {
    pub recurrent: usize,
    pub action_dim: usize,
    /// Readout width; defaults to the embedding width.
    pub hidden: Option<usize>,
    pub features: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for NapConfig {
    fn default() -> NapConfig {
        NapConfig {
            recurrent: 200,
            action_dim: 32,
            hidden: None,
            features: None,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// Gated recurrent unit with gates stacked `[reset; update; candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
}

struct GruStep {
    x: Array1<f64>,
    prev: Array1<f64>,
    r: Array1<f64>,
    z: Array1<f64>,
    n: Array1<f64>,
    hn: Array1<f64>,
}

impl Gru {
    fn size(&self) -> usize {
        self.hidden.input_dim()
    }

    fn step(&self, x: ArrayView1<f64>, prev: &Array1<f64>) -> (Array1<f64>, GruStep) {
        let h = self.size();
        let gi = self.input.weight.dot(&x) + &self.input.bias;
        let gh = self.hidden.weight.dot(prev) + &self.hidden.bias;
        let r = (&gi.slice(s![..h]) + &gh.slice(s![..h])).mapv(sigmoid);
        let z = (&gi.slice(s![h..2 * h]) + &gh.slice(s![h..2 * h])).mapv(sigmoid);
        let hn = gh.slice(s![2 * h..]).to_owned();
        let n = (&gi.slice(s![2 * h..]) + &(&r * &hn)).mapv(f64::tanh);
        let next = &n + &(&z * &(prev - &n));
        (
            next,
            GruStep {
                x: x.to_owned(),
                prev: prev.clone(),
                r,
                z,
                n,
                hn,
            },
        )
    }

    /// Returns the gradients for the input vector and previous state.
    fn step_backward(&self, t: &GruStep, d_next: &Array1<f64>, g: &mut Gru) -> (Array1<f64>, Array1<f64>) {
        let dn = d_next * &t.z.mapv(|z| 1.0 - z);
        let dz = d_next * &(&t.prev - &t.n);
        let mut d_prev = d_next * &t.z;
        let dan = &dn * &t.n.mapv(|n| 1.0 - n * n);
        let dr = &dan * &t.hn;
        let dhn = &dan * &t.r;
        let dar = &dr * &t.r.mapv(|r| r * (1.0 - r));
        let daz = &dz * &t.z.mapv(|z| z * (1.0 - z));
        let gi = concatenate(Axis(0), &[dar.view(), daz.view(), dan.view()]).expect("gates");
        let gh = concatenate(Axis(0), &[dar.view(), daz.view(), dhn.view()]).expect("gates");
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };
        g.input.weight += &outer(&gi, &t.x);
        g.input.bias += &gi;
        g.hidden.weight += &outer(&gh, &t.prev);
        g.hidden.bias += &gh;
        d_prev += &self.hidden.weight.t().dot(&gh);
        let dx = self.input.weight.t().dot(&gi);
        (dx, d_prev)
    }
}

/// Attention-over-prefix action probe without an explicit stack.
///
/// A GRU reads the action history; its state `v` attends over ROOT and the
/// generated words with a biaffine score `rᵀWv + uᵀr + wᵀv + c`, and a
/// three-layer readout over `[context; v]` gives the action logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NapProbe {
    pub action_input: Array2<f64>,
    pub gru: Gru,
    pub att_bilinear: Array2<f64>,
    pub att_key: Array1<f64>,
    pub att_query: Array1<f64>,
    pub att_bias: f64,
    pub readout: [Linear; 3],
    pub action_emb: Array2<f64>,
    pub action_bias: Array1<f64>,
    pub root: Array1<f64>,
    pub dropout: f64,
}

struct Attended {
    alpha: Array1<f64>,
    keys: Array2<f64>,
    projected_query: Array1<f64>,
    context: Array1<f64>,
}

impl NapProbe {
    pub fn new(dim: usize, config: &NapConfig) -> NapProbe {
        let hidden = config.hidden.unwrap_or(dim);
        let features = config.features.unwrap_or(hidden);
        let rec = config.recurrent;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gb = 1.0 / (rec as f64).sqrt();
        let gru = Gru {
            input: Linear {
                weight: nn::uniform_matrix(3 * rec, config.action_dim, gb, &mut rng),
                bias: nn::uniform_vector(3 * rec, gb, &mut rng),
            },
            hidden: Linear {
                weight: nn::uniform_matrix(3 * rec, rec, gb, &mut rng),
                bias: nn::uniform_vector(3 * rec, gb, &mut rng),
            },
        };
        let ab = 1.0 / (dim as f64).sqrt();
        NapProbe {
            action_input: nn::uniform_matrix(3, config.action_dim, 1.0, &mut rng),
            gru,
            att_bilinear: nn::uniform_matrix(dim, rec, ab, &mut rng),
            att_key: nn::uniform_vector(dim, ab, &mut rng),
            att_query: nn::uniform_vector(rec, gb, &mut rng),
            att_bias: 0.0,
            readout: [
                Linear::init(dim + rec, hidden, &mut rng),
                Linear::init(hidden, hidden, &mut rng),
                Linear::init(hidden, features, &mut rng),
            ],
            action_emb: nn::uniform_matrix(3, features, 1.0 / (features as f64).sqrt(), &mut rng),
            action_bias: Array1::zeros(3),
            root: nn::uniform_vector(dim, ab, &mut rng),
            dropout: config.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.root.len()
    }

    pub fn recurrent_size(&self) -> usize {
        self.gru.size()
    }

    fn keys(&self, emb: ArrayView2<f64>, generated: usize) -> Result<Array2<f64>> {
        if generated > emb.nrows() {
            return Err(Error::InvalidInput(format!(
                "probe needs {generated} prefix rows but only {} were given",
                emb.nrows()
            )));
        }
        let root = self.root.view().insert_axis(Axis(0));
        Ok(concatenate(Axis(0), &[root, emb.slice(s![..generated, ..])]).expect("same width"))
    }

    fn attend(&self, keys: Array2<f64>, v: &Array1<f64>) -> Attended {
        let projected_query = self.att_bilinear.dot(v) + &self.att_key;
        let offset = self.att_query.dot(v) + self.att_bias;
        let scores = keys.dot(&projected_query) + offset;
        let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut alpha = scores.mapv(|s| (s - max).exp());
        alpha /= alpha.sum();
        let context = keys.t().dot(&alpha);
        Attended {
            alpha,
            keys,
            projected_query,
            context,
        }
    }

    /// Attention weights over `[ROOT; generated words]` for a history.
    pub fn attention(&self, history: &[Action], emb: ArrayView2<f64>, generated: usize) -> Result<Array1<f64>> {
        let mut v = Array1::zeros(self.recurrent_size());
        for &a in history {
            v = self.gru.step(self.action_input.row(a.index()), &v).0;
        }
        Ok(self.attend(self.keys(emb, generated)?, &v).alpha)
    }

    fn readout_logits(&self, context: &Array1<f64>, v: &Array1<f64>) -> [f64; 3] {
        let q = concatenate(Axis(0), &[context.view(), v.view()]).expect("vectors");
        let trace = mlp_forward(&self.readout, q.insert_axis(Axis(0)), 0.0, None);
        let l = action_logits(&self.action_emb, &self.action_bias, trace.features.view());
        [l[[0, 0]], l[[0, 1]], l[[0, 2]]]
    }
}

impl Tensors for NapProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("action_input", self.action_input.shape(), nn::slice(&self.action_input));
        self.gru.input.visit("gru.ih", f);
        self.gru.hidden.visit("gru.hh", f);
        f("att.bilinear", self.att_bilinear.shape(), nn::slice(&self.att_bilinear));
        f("att.key", self.att_key.shape(), nn::slice(&self.att_key));
        f("att.query", self.att_query.shape(), nn::slice(&self.att_query));
        f("att.bias", &[1], std::slice::from_ref(&self.att_bias));
        for (i, l) in self.readout.iter().enumerate() {
            l.visit(&format!("mlp.{i}"), f);
        }
        f("action_emb", self.action_emb.shape(), nn::slice(&self.action_emb));
        f("action_bias", self.action_bias.shape(), nn::slice(&self.action_bias));
        f("root", self.root.shape(), nn::slice(&self.root));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("action_input", nn::slice_mut(&mut self.action_input));
        self.gru.input.visit_mut("gru.ih", f);
        self.gru.hidden.visit_mut("gru.hh", f);
        f("att.bilinear", nn::slice_mut(&mut self.att_bilinear));
        f("att.key", nn::slice_mut(&mut self.att_key));
        f("att.query", nn::slice_mut(&mut self.att_query));
        f("att.bias", std::slice::from_mut(&mut self.att_bias));
        for (i, l) in self.readout.iter_mut().enumerate() {
            l.visit_mut(&format!("mlp.{i}"), f);
        }
        f("action_emb", nn::slice_mut(&mut self.action_emb));
        f("action_bias", nn::slice_mut(&mut self.action_bias));
        f("root", nn::slice_mut(&mut self.root));
    }
}

impl Probe for NapProbe {
    fn arch(&self) -> Arch {
        Arch::Nap
    }

    fn begin(&self) -> Memory {
        Memory(Some(Array1::zeros(self.recurrent_size())))
    }

    fn advance(&self, memory: &Memory, action: Action) -> Memory {
        let prev = memory
            .0
            .clone()
            .unwrap_or_else(|| Array1::zeros(self.recurrent_size()));
        Memory(Some(self.gru.step(self.action_input.row(action.index()), &prev).0))
    }

    fn scores(&self, memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        let emb = emb.vectors();
        check_dim(emb, self.dim())?;
        let zero;
        let v = match &memory.0 {
            Some(v) => v,
            None => {
                zero = Array1::zeros(self.recurrent_size());
                &zero
            }
        };
        let att = self.attend(self.keys(emb, state.generated())?, v);
        Ok(self.readout_logits(&att.context, v))
    }
}

impl Differentiable for NapProbe {
    fn backward(
        &self,
        emb: ArrayView2<f64>,
        n_words: usize,
        actions: &[Action],
        steps: Range<usize>,
        noise: Option<&mut ChaCha8Rng>,
        mut grads: Option<&mut NapProbe>,
    ) -> Result<Backward> {
        check_dim(emb, self.dim())?;
        let d = self.dim();
        let rec = self.recurrent_size();
        let mut input_grad = Array2::zeros(emb.raw_dim());
        let states = scored_states(n_words, actions, &steps)?;
        if states.is_empty() {
            return Ok(Backward {
                log_likelihood: 0.0,
                input: input_grad,
            });
        }
        let last = states.last().expect("nonempty").0;
        // v[k] is the recurrent state before actions[k]
        let mut vs = vec![Array1::zeros(rec)];
        let mut trace = Vec::with_capacity(last);
        for &a in &actions[..last] {
            let (next, t) = self.gru.step(self.action_input.row(a.index()), vs.last().expect("nonempty"));
            vs.push(next);
            trace.push(t);
        }
        let m = states.len();
        let mut attended = Vec::with_capacity(m);
        let mut q = Array2::zeros((m, d + rec));
        for (row, (k, state)) in states.iter().enumerate() {
            let att = self.attend(self.keys(emb, state.generated())?, &vs[*k]);
            q.slice_mut(s![row, ..d]).assign(&att.context);
            q.slice_mut(s![row, d..]).assign(&vs[*k]);
            attended.push(att);
        }
        let mlp = mlp_forward(&self.readout, q, self.dropout, noise);
        let logits = action_logits(&self.action_emb, &self.action_bias, mlp.features.view());
        let mut total = 0.0;
        let mut d_logits = Array2::zeros((m, 3));
        for (row, (k, state)) in states.iter().enumerate() {
            let valid = state.valid_actions();
            let l = logits.row(row);
            let lp = masked_log_softmax([l[0], l[1], l[2]], valid);
            total += lp[actions[*k].index()];
            d_logits
                .row_mut(row)
                .assign(&ndarray::arr1(&score_gradient(&lp, valid, actions[*k])));
        }
        let d_features = d_logits.dot(&self.action_emb);
        let mut scratch = self.zeros_like();
        let g: &mut NapProbe = match grads.as_deref_mut() {
            Some(g) => g,
            None => &mut scratch,
        };
        g.action_emb += &d_logits.t().dot(&mlp.features);
        g.action_bias += &d_logits.sum_axis(Axis(0));
        let d_q = mlp_backward(&self.readout, &mlp, d_features, Some(&mut g.readout));
        let mut d_v: Vec<Array1<f64>> = vec![Array1::zeros(rec); last + 1];
        for (row, ((k, _), att)) in states.iter().zip(&attended).enumerate() {
            let d_context = d_q.slice(s![row, ..d]);
            d_v[*k] += &d_q.slice(s![row, d..]);
            let d_alpha = att.keys.dot(&d_context);
            let mean = att.alpha.dot(&d_alpha);
            let d_scores = &att.alpha * &(&d_alpha - mean);
            // ∂/∂keys = α ⊗ d_context + d_scores ⊗ (Wv + u)
            let weighted_keys = att.keys.t().dot(&d_scores);
            let d_sum = d_scores.sum();
            let v = &vs[*k];
            g.att_bilinear += &weighted_keys
                .view()
                .insert_axis(Axis(1))
                .dot(&v.view().insert_axis(Axis(0)));
            g.att_key += &weighted_keys;
            g.att_query.scaled_add(d_sum, v);
            g.att_bias += d_sum;
            d_v[*k] += &(self.att_bilinear.t().dot(&weighted_keys) + &self.att_query * d_sum);
            for (pos, (&a, &ds)) in att.alpha.iter().zip(&d_scores).enumerate() {
                let mut dk = d_context.to_owned() * a;
                dk.scaled_add(ds, &att.projected_query);
                if pos == 0 {
                    g.root += &dk;
                } else {
                    let mut r = input_grad.row_mut(pos - 1);
                    r += &dk;
                }
            }
        }
        for j in (0..last).rev() {
            let t = &trace[j];
            let d_next = std::mem::replace(&mut d_v[j + 1], Array1::zeros(0));
            let (dx, d_prev) = self.gru.step_backward(t, &d_next, &mut g.gru);
            let mut row = g.action_input.row_mut(actions[j].index());
            row += &dx;
            d_v[j] += &d_prev;
        }
        Ok(Backward {
            log_likelihood: total,
            input: input_grad,
        })
    }

    fn dropout(&self) -> f64 {
        self.dropout
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::parse_codes;

    fn small() -> NapProbe {
        NapProbe::new(
            4,
            &NapConfig {
                recurrent: 5,
                action_dim: 3,
                hidden: Some(6),
                features: Some(4),
                ..NapConfig::default()
            },
        )
    }

    #[test]
    fn attention_is_normalised() {
        let nap = small();
        let emb = nn::uniform_matrix(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let history = parse_codes("GGLG").unwrap();
        let alpha = nap.attention(&history, emb.view(), 3).unwrap();
        assert_eq!(alpha.len(), 4);
        assert!((alpha.sum() - 1.0).abs() < 1e-12);
        let single = nap.attention(&[], emb.view(), 0).unwrap();
        assert_eq!(single.to_vec(), vec![1.0]);
    }

    #[test]
    fn ungenerated_rows_are_ignored() {
        let nap = small();
        let vectors = nn::uniform_matrix(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let emb = EmbeddingMatrix::new("s", 0, "t", vectors.clone()).unwrap();
        let history = parse_codes("GG").unwrap();
        let state = ParseState::replay(4, &history).unwrap();
        let memory = history.iter().fold(nap.begin(), |m, &a| nap.advance(&m, a));
        let before = nap.scores(&memory, &state, &emb).unwrap();
        let mut other = vectors;
        other.slice_mut(s![2.., ..]).fill(7.0);
        let swapped = emb.with_vectors(other).unwrap();
        assert_eq!(before, nap.scores(&memory, &state, &swapped).unwrap());
    }

    #[test]
    fn memory_matches_backward_replay() {
        let nap = small();
        let vectors = nn::uniform_matrix(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let emb = EmbeddingMatrix::new("s", 0, "t", vectors.clone()).unwrap();
        let actions = parse_codes("GGLGRR").unwrap();
        let via_scores = crate::probes::sequence_nll(&nap, &emb, 3, &actions, Default::default()).unwrap();
        let via_backward = nap.backward(vectors.view(), 3, &actions, 0..actions.len(), None, None).unwrap();
        assert!((via_scores.value + via_backward.log_likelihood).abs() < 1e-12);
    }
}
