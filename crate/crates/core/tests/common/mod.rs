//! Brute-force references and random instances shared by the integration
//! tests.
#![allow(dead_code)]

use incparse::probes::{GapConfig, GapProbe, MapConfig, MapProbe, NapConfig, NapProbe};
use incparse::transition::{Action, ParseState};
use incparse::EmbeddingMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Head array (1-based words, 0 = root) that forms a tree: one root and
/// every word reaches it.
pub fn is_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if heads.iter().any(|&h| h > n) || heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    (1..=n).all(|w| {
        let mut cur = w;
        for _ in 0..=n {
            if cur == 0 {
                return true;
            }
            cur = heads[cur - 1];
        }
        false
    })
}

fn dominates(heads: &[usize], ancestor: usize, mut w: usize) -> bool {
    while w != 0 {
        if w == ancestor {
            return true;
        }
        w = heads[w - 1];
    }
    ancestor == 0
}

/// Every word strictly between a head and its dependent descends from the
/// head. The root arc is spanned from position 0.
pub fn is_projective_tree(heads: &[usize]) -> bool {
    is_tree(heads)
        && (1..=heads.len()).all(|d| {
            let h = heads[d - 1];
            let (lo, hi) = (h.min(d), h.max(d));
            (lo + 1..hi).all(|k| dominates(heads, h, k))
        })
}

/// All projective single-root head arrays over `n` words, by enumeration of
/// `(n+1)^n` candidates.
pub fn projective_trees(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut heads = vec![0usize; n];
    loop {
        if is_projective_tree(&heads) {
            out.push(heads.clone());
        }
        let mut i = 0;
        loop {
            if i == n {
                return out;
            }
            heads[i] += 1;
            if heads[i] <= n {
                break;
            }
            heads[i] = 0;
            i += 1;
        }
    }
}

/// A uniformly chosen valid action at every step until terminal.
pub fn random_terminal(n: usize, rng: &mut impl Rng) -> Vec<Action> {
    let mut state = ParseState::initial(n).unwrap();
    let mut actions = Vec::new();
    while !state.is_terminal() {
        let valid: Vec<Action> = state.valid_actions().iter().collect();
        let a = valid[rng.random_range(0..valid.len())];
        state = state.apply(a).unwrap();
        actions.push(a);
    }
    actions
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn random_emb(n: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingMatrix {
    EmbeddingMatrix::new("rand", 0, "test", random_matrix(n, dim, 1.0, rng)).unwrap()
}

pub fn gap(dim: usize, seed: u64) -> GapProbe {
    let config = GapConfig {
        rank: Some(4),
        init_bound: 0.5,
        seed,
        ..GapConfig::default()
    };
    GapProbe::new(dim, &config).unwrap()
}

pub fn map(dim: usize, seed: u64) -> MapProbe {
    let config = MapConfig {
        hidden: Some(6),
        features: Some(5),
        dropout: 0.0,
        seed,
    };
    MapProbe::new(dim, &config)
}

pub fn nap(dim: usize, seed: u64) -> NapProbe {
    let config = NapConfig {
        recurrent: 5,
        action_dim: 3,
        hidden: Some(6),
        features: Some(4),
        dropout: 0.0,
        seed,
    };
    NapProbe::new(dim, &config)
}

pub fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}
