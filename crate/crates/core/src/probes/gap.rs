use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, masked_log_softmax, node_vector, score_gradient, scored_states, Arch, Backward, Differentiable, Memory, Probe};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, softplus, Tensors};
use crate::transition::{Action, ParseState};

pub const MIN_BETA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub rank: Option<usize>,
    pub tau: f64,
    pub beta: f64,
    pub init_bound: f64,
    /// Flips the sign of the depth difference in the arc-direction terms.
    pub flip_arc_sign: bool,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> GapConfig {
        GapConfig {
            rank: None,
            tau: 1.5,
            beta: 1.0,
            init_bound: 0.05,
            flip_arc_sign: false,
            seed: 0,
        }
    }
}

/// Geometric action probe.
///
/// With `x = (‖B(h₁−h₂)‖² − τ)/β` and `y = ±(‖Bh₁‖² − ‖Bh₂‖²)/β`:
/// `P(GEN) = σ(x)`, `P(LEFT_ARC) = σ(−x)σ(y)`, `P(RIGHT_ARC) = σ(−x)σ(−y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GapProbe {
    pub proj: Array2<f64>,
    pub tau: f64,
    pub beta: f64,
    pub root: Array1<f64>,
    pub arc_sign: f64,
}

struct Features {
    x: f64,
    y: f64,
    diff: Array1<f64>,
    u: Array1<f64>,
    p1: Array1<f64>,
    p2: Array1<f64>,
}

impl GapProbe {
    pub fn new(dim: usize, config: &GapConfig) -> Result<GapProbe> {
        if !(config.beta > 0.0) {
            return Err(Error::InvalidInput("beta must be positive".into()));
        }
        let rank = config.rank.unwrap_or(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let proj = nn::uniform_matrix(rank, dim, config.init_bound, &mut rng);
        let root = nn::uniform_vector(dim, config.init_bound, &mut rng);
        Ok(GapProbe {
            proj,
            tau: config.tau,
            beta: config.beta,
            root,
            arc_sign: if config.flip_arc_sign { -1.0 } else { 1.0 },
        })
    }

    pub fn with_projection(mut self, proj: Array2<f64>) -> Result<GapProbe> {
        if proj.ncols() != self.proj.ncols() {
            return Err(Error::DimMismatch {
                expected: self.proj.ncols(),
                found: proj.ncols(),
            });
        }
        self.proj = proj.as_standard_layout().into_owned();
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.proj.ncols()
    }

    fn features(&self, h1: ArrayView1<f64>, h2: ArrayView1<f64>) -> Features {
        let diff = &h1 - &h2;
        let u = self.proj.dot(&diff);
        let p1 = self.proj.dot(&h1);
        let p2 = self.proj.dot(&h2);
        let dist = u.dot(&u);
        let x = (dist - self.tau) / self.beta;
        let y = self.arc_sign * (p1.dot(&p1) - p2.dot(&p2)) / self.beta;
        Features { x, y, diff, u, p1, p2 }
    }

    /// Unmasked `(log P(GEN), log P(LEFT_ARC), log P(RIGHT_ARC))` for two
    /// stack vectors.
    pub fn unmasked_log_probs(&self, h1: ArrayView1<f64>, h2: ArrayView1<f64>) -> [f64; 3] {
        let f = self.features(h1, h2);
        log_probs(f.x, f.y)
    }
}

fn log_probs(x: f64, y: f64) -> [f64; 3] {
    [-softplus(-x), -softplus(x) - softplus(-y), -softplus(x) - softplus(y)]
}

impl Tensors for GapProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("proj", self.proj.shape(), nn::slice(&self.proj));
        f("tau", &[1], std::slice::from_ref(&self.tau));
        f("beta", &[1], std::slice::from_ref(&self.beta));
        f("root", self.root.shape(), nn::slice(&self.root));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("proj", nn::slice_mut(&mut self.proj));
        f("tau", std::slice::from_mut(&mut self.tau));
        f("beta", std::slice::from_mut(&mut self.beta));
        f("root", nn::slice_mut(&mut self.root));
    }
}

impl Probe for GapProbe {
    fn arch(&self) -> Arch {
        Arch::Gap
    }

    fn scores(&self, _memory: &Memory, state: &ParseState, emb: &EmbeddingMatrix) -> Result<[f64; 3]> {
        let emb = emb.vectors();
        check_dim(emb, self.dim())?;
        let Some(s2) = state.s2() else {
            return Ok([0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        };
        let h1 = node_vector(state.s1(), emb, &self.root)?;
        let h2 = node_vector(s2, emb, &self.root)?;
        Ok(self.unmasked_log_probs(h1, h2))
    }
}

impl Differentiable for GapProbe {
    fn backward(
        &self,
        emb: ArrayView2<f64>,
        n_words: usize,
        actions: &[Action],
        steps: Range<usize>,
        _noise: Option<&mut ChaCha8Rng>,
        mut grads: Option<&mut GapProbe>,
    ) -> Result<Backward> {
        check_dim(emb, self.dim())?;
        let mut input = Array2::zeros(emb.raw_dim());
        let mut total = 0.0;
        let inv_beta = 1.0 / self.beta;
        for (k, state) in scored_states(n_words, actions, &steps)? {
            let s1 = state.s1();
            let s2 = state.s2().expect("scored states have two stack nodes");
            let h1 = node_vector(s1, emb, &self.root)?;
            let h2 = node_vector(s2, emb, &self.root)?;
            let f = self.features(h1, h2);
            let valid = state.valid_actions();
            let lp = masked_log_softmax(log_probs(f.x, f.y), valid);
            let target = actions[k];
            total += lp[target.index()];
            let g = score_gradient(&lp, valid, target);
            let (sx, sy) = (sigmoid(f.x), sigmoid(f.y));
            let dx = g[0] * (1.0 - sx) - (g[1] + g[2]) * sx;
            let dy = g[1] * (1.0 - sy) - g[2] * sy;
            let cx = 2.0 * inv_beta * dx;
            let cy = 2.0 * inv_beta * dy * self.arc_sign;
            let bu = self.proj.t().dot(&f.u);
            let bp1 = self.proj.t().dot(&f.p1);
            let bp2 = self.proj.t().dot(&f.p2);
            let dh1 = &bu * cx + &bp1 * cy;
            let dh2 = &bu * -cx - &bp2 * cy;
            for (node, dh) in [(s1, &dh1), (s2, &dh2)] {
                match node {
                    0 => {
                        if let Some(g) = grads.as_deref_mut() {
                            g.root += dh;
                        }
                    }
                    w => {
                        let mut row = input.row_mut(w - 1);
                        row += dh;
                    }
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let outer = |a: &Array1<f64>, b: ArrayView1<f64>| {
                    a.view().insert_axis(ndarray::Axis(1)).dot(&b.insert_axis(ndarray::Axis(0)))
                };
                g.proj.scaled_add(cx, &outer(&f.u, f.diff.view()));
                g.proj.scaled_add(cy, &outer(&f.p1, h1));
                g.proj.scaled_add(-cy, &outer(&f.p2, h2));
                g.tau -= dx * inv_beta;
                g.beta -= (dx * f.x + dy * f.y) * inv_beta;
            }
        }
        Ok(Backward {
            log_likelihood: total,
            input,
        })
    }

    fn project(&mut self) {
        self.beta = self.beta.max(MIN_BETA);
    }
}
