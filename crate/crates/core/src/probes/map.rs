use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, masked_log_softmax, node_vector, score_gradient, scored_states, Arch, Backward, Differentiable, Memory, Probe};
use crate::embedding::EmbeddingMatrix;
use crate::error::Result;
use crate::nn::{self, dropout_mask, relu, relu_backward, Linear, Tensors};
use crate::transition::{Action, NodeId, ParseState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    /// Hidden width; defaults to the embedding width.
    pub hidden: Option<usize>,
    /// Feature width; defaults to the hidden width.
    pub features: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> MapConfig {
        MapConfig {
            hidden: None,
            features: None,
            dropout: 0.2,
            seed: 0,
        }
    }
}

/// MLP action probe over the top two stack vectors `[h_s1; h_s2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapProbe {
    pub layers: [Linear; 3],
    pub action_emb: Array2<f64>,
    pub action_bias: Array1<f64>,
    pub root: Array1<f64>,
    pub dropout: f64,
}

/// Intermediates of a batched forward pass.
pub(crate) struct MlpTrace {
    pub input: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
    mask1: Option<Array2<f64>>,
    mask2: Option<Array2<f64>>,
    pub features: Array2<f64>,
}

/// Three-layer readout shared with the recurrent probe.
pub(crate) fn mlp_forward(
    layers: &[Linear; 3],
    input: Array2<f64>,
    dropout: f64,
    noise: Option<&mut ChaCha8Rng>,
) -> MlpTrace {
    let pre1 = layers[0].forward(input.view());
    let mut act1 = relu(&pre1);
    let (mut mask1, mut mask2) = (None, None);
    let mut noise = noise;
    if let Some(rng) = noise.as_deref_mut() {
        let m = dropout_mask(act1.dim(), dropout, rng);
        act1 *= &m;
        mask1 = Some(m);
    }
    let pre2 = layers[1].forward(act1.view());
    let mut act2 = relu(&pre2);
    if let Some(rng) = noise.as_deref_mut() {
        let m = dropout_mask(act2.dim(), dropout, rng);
        act2 *= &m;
        mask2 = Some(m);
    }
    let features = layers[2].forward(act2.view());
    MlpTrace {
        input,
        pre1,
        act1,
        pre2,
        act2,
        mask1,
        mask2,
        features,
    }
}

/// Backpropagates `d_features`, returning the gradient of the MLP input.
pub(crate) fn mlp_backward(
    layers: &[Linear; 3],
    trace: &MlpTrace,
    d_features: Array2<f64>,
    grads: Option<&mut [Linear; 3]>,
) -> Array2<f64> {
    let mut scratch;
    let g = match grads {
        Some(g) => g,
        None => {
            scratch = [
                Linear::zeros(layers[0].input_dim(), layers[0].output_dim()),
                Linear::zeros(layers[1].input_dim(), layers[1].output_dim()),
                Linear::zeros(layers[2].input_dim(), layers[2].output_dim()),
            ];
            &mut scratch
        }
    };
    let [g0, g1, g2] = g;
    let mut d_act2 = layers[2].backward(trace.act2.view(), d_features.view(), g2);
    if let Some(m) = &trace.mask2 {
        d_act2 *= m;
    }
    let d_pre2 = relu_backward(&trace.pre2, &d_act2);
    let mut d_act1 = layers[1].backward(trace.act1.view(), d_pre2.view(), g1);
    if let Some(m) = &trace.mask1 {
        d_act1 *= m;
    }
    let d_pre1 = relu_backward(&trace.pre1, &d_act1);
    layers[0].backward(trace.input.view(), d_pre1.view(), g0)
}

/// Logits `E f + b` for each feature row.
pub(crate) fn action_logits(action_emb: &Array2<f64>, bias: &Array1<f64>, features: ArrayView2<f64>) -> Array2<f64> {
    features.dot(&action_emb.t()) + bias
}

impl MapProbe {
    pub fn new(dim: usize, config: &MapConfig) -> MapProbe {
        let hidden = config.hidden.unwrap_or(dim);
        let features = config.features.unwrap_or(hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = [
            Linear::init(2 * dim, hidden, &mut rng),
            Linear::init(hidden, hidden, &mut rng),
            Linear::init(hidden, features, &mut rng),
        ];
        let bound = 1.0 / (features as f64).sqrt();
        MapProbe {
            layers,
            action_emb: nn::uniform_matrix(3, features, bound, &mut rng),
            action_bias: Array1::zeros(3),
            root: nn::uniform_vector(dim, 1.0 / (dim as f64).sqrt(), &mut rng),
            dropout: config.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.root.len()
    }

    fn stack_input(&self, state: &ParseState, emb: ArrayView2<f64>) -> Result<Array1<f64>> {
        let s2 = state.s2().expect("two stack nodes");
        let h1 = node_vector(state.s1(), emb, &self.root)?;
        let h2 = node_vector(s2, emb, &self.root)?;
        Ok(concatenate(Axis(0), &[h1, h2]).expect("same width"))
    }

    /// Forward pass over one `[h_s1; h_s2]` input.
    pub fn logits(&self, input: &Array1<f64>) -> [f64; 3] {
        let trace = mlp_forward(&self.layers, input.view().insert_axis(Axis(0)).to_owned(), 0.0, None);
        let l = action_logits(&self.action_emb, &self.action_bias, trace.features.view());
        [l[[0, 0]], l[[0, 1]], l[[0, 2]]]
    }
}

impl Tensors for MapProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("mlp.{i}"), f);
        }
        f("action_emb", self.action_emb.shape(), nn::slice(&self.action_emb));
        f("action_bias", self.action_bias.shape(), nn::slice(&self.action_bias));
        f("root", self.root.shape(), nn::slice(&self.root));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("mlp.{i}"), f);
        }
        f("action_emb", nn::slice_mut(&mut self.action_emb));
        f("action_bias", nn::slice_mut(&mut self.action_bias));
        f("root", nn::slice_mut(&mut self.root));
    }
}

impl Probe for MapProbe {
    fn arch(&self) -> Arch {
        Arch::Map
    }

    fn scores(&self, _memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        let emb = emb.vectors();
        check_dim(emb, self.dim())?;
        if state.s2().is_none() {
            return Ok([0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        }
        Ok(self.logits(&self.stack_input(state, emb)?))
    }
}

impl Differentiable for MapProbe {
    fn backward(
        &self,
        emb: ArrayView2<f64>,
        n_words: usize,
        actions: &[Action],
        steps: Range<usize>,
        noise: Option<&mut ChaCha8Rng>,
        grads: Option<&mut MapProbe>,
    ) -> Result<Backward> {
        check_dim(emb, self.dim())?;
        let d = self.dim();
        let mut input_grad = Array2::zeros(emb.raw_dim());
        let states = scored_states(n_words, actions, &steps)?;
        if states.is_empty() {
            return Ok(Backward {
                log_likelihood: 0.0,
                input: input_grad,
            });
        }
        let m = states.len();
        let mut input = Array2::zeros((m, 2 * d));
        let mut nodes: Vec<(NodeId, NodeId)> = Vec::with_capacity(m);
        for (row, (_, state)) in states.iter().enumerate() {
            input.row_mut(row).assign(&self.stack_input(state, emb)?);
            nodes.push((state.s1(), state.s2().expect("two stack nodes")));
        }
        let trace = mlp_forward(&self.layers, input, self.dropout, noise);
        let logits = action_logits(&self.action_emb, &self.action_bias, trace.features.view());
        let mut total = 0.0;
        let mut d_logits = Array2::zeros((m, 3));
        for (row, (k, state)) in states.iter().enumerate() {
            let valid = state.valid_actions();
            let l = logits.row(row);
            let lp = masked_log_softmax([l[0], l[1], l[2]], valid);
            total += lp[actions[*k].index()];
            let g = score_gradient(&lp, valid, actions[*k]);
            d_logits.row_mut(row).assign(&ndarray::arr1(&g));
        }
        let d_features = d_logits.dot(&self.action_emb);
        let d_input = match grads {
            Some(g) => {
                g.action_emb += &d_logits.t().dot(&trace.features);
                g.action_bias += &d_logits.sum_axis(Axis(0));
                let d_input = mlp_backward(&self.layers, &trace, d_features, Some(&mut g.layers));
                for (row, &(s1, s2)) in nodes.iter().enumerate() {
                    if s1 == 0 {
                        g.root += &d_input.slice(s![row, ..d]);
                    }
                    if s2 == 0 {
                        g.root += &d_input.slice(s![row, d..]);
                    }
                }
                d_input
            }
            None => mlp_backward(&self.layers, &trace, d_features, None),
        };
        for (row, &(s1, s2)) in nodes.iter().enumerate() {
            if s1 != 0 {
                let mut r = input_grad.row_mut(s1 - 1);
                r += &d_input.slice(s![row, ..d]);
            }
            if s2 != 0 {
                let mut r = input_grad.row_mut(s2 - 1);
                r += &d_input.slice(s![row, d..]);
            }
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
    use crate::transition::{parse_codes, ActionSet};

    #[test]
    fn zero_weights_give_uniform() {
        let mut map = MapProbe::new(4, &MapConfig::default());
        crate::nn::zero(&mut map);
        let emb = EmbeddingMatrix::new("s", 0, "t", Array2::ones((3, 4))).unwrap();
        let state = ParseState::replay(3, &parse_codes("GG").unwrap()).unwrap();
        assert_eq!(state.valid_actions(), ActionSet::FULL);
        let lp = map.log_dist(&Memory::default(), &state, &emb).unwrap();
        for v in lp {
            assert!((v.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
        let state = ParseState::replay(3, &parse_codes("GGG").unwrap()).unwrap();
        let lp = map.log_dist(&Memory::default(), &state, &emb).unwrap();
        assert_eq!(lp[0], f64::NEG_INFINITY);
        assert!((lp[1].exp() - 0.5).abs() < 1e-15 && (lp[2].exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_unit_trace() {
        // dim 1, one hidden unit, one feature: every step can be done by hand
        let mut map = MapProbe::new(
            1,
            &MapConfig {
                hidden: Some(1),
                features: Some(1),
                ..MapConfig::default()
            },
        );
        map.layers[0].weight = ndarray::array![[0.5, -1.0]];
        map.layers[0].bias = ndarray::array![0.25];
        map.layers[1].weight = ndarray::array![[2.0]];
        map.layers[1].bias = ndarray::array![-0.5];
        map.layers[2].weight = ndarray::array![[3.0]];
        map.layers[2].bias = ndarray::array![0.1];
        map.action_emb = ndarray::array![[1.0], [-1.0], [0.5]];
        map.action_bias = ndarray::array![0.0, 0.2, -0.2];
        // z = [2, 0.5]: a1 = 1 - 0.5 + 0.25 = 0.75; a2 = 1.5 - 0.5 = 1; f = 3.1
        let logits = map.logits(&ndarray::array![2.0, 0.5]);
        let expected = [3.1, -3.1 + 0.2, 1.55 - 0.2];
        for (a, b) in logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // negative pre-activation is cut by the ReLU
        let logits = map.logits(&ndarray::array![-2.0, 0.5]);
        // a1 = -1 - 0.5 + 0.25 < 0, a2 = -0.5 -> 0, f = 0.1
        let expected = [0.1, -0.1 + 0.2, 0.05 - 0.2];
        for (a, b) in logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reads_only_the_top_two_rows() {
        let map = MapProbe::new(4, &MapConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vectors = nn::uniform_matrix(5, 4, 1.0, &mut rng);
        let emb = EmbeddingMatrix::new("s", 0, "t", vectors.clone()).unwrap();
        // stack [0, 1, 3] after GGG L? use GG G then stack [0,1,2,3]
        let state = ParseState::replay(5, &parse_codes("GGGL").unwrap()).unwrap();
        assert_eq!(state.stack(), &[0, 1, 3]);
        let before = map.scores(&Memory::default(), &state, &emb).unwrap();
        let mut other = vectors.clone();
        other.row_mut(1).fill(9.0);
        other.row_mut(3).fill(-4.0);
        other.row_mut(4).fill(2.0);
        let after = map
            .scores(&Memory::default(), &state, &emb.with_vectors(other).unwrap())
            .unwrap();
        assert_eq!(before, after);
    }
}
