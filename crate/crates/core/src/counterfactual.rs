//! Gradient edits of hidden states toward a target parse action sequence,
//! and their effect on continuation surprisal.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::npz::{Continuation, NpzItem, Reading};
use crate::probes::{probe_input_gradient, Differentiable, LoadedProbe, Objective};
use crate::transition::{codes, Action};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub objective: Objective,
    /// Stop once the target probability exceeds this.
    pub stop_above: f64,
}

impl Default for PerturbConfig {
    fn default() -> PerturbConfig {
        PerturbConfig {
            epsilon: 1.0,
            steps: 8,
            objective: Objective::Probability,
            stop_above: 0.99,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Perturbation {
    pub emb: EmbeddingMatrix,
    /// Target probability before each update, then after the last one.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Repeated `h ← h + ε ∇_h objective(target | history)`. Entries whose
/// gradient is exactly zero are left untouched.
pub fn perturb<P: Differentiable>(
    emb: &EmbeddingMatrix,
    probe: &P,
    n_words: usize,
    history: &[Action],
    target: &[Action],
    config: &PerturbConfig,
) -> Result<Perturbation> {
    if !(config.epsilon >= 0.0 && config.epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("step size must be finite and nonnegative, got {}", config.epsilon)));
    }
    let mut h = emb.vectors().to_owned();
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut iterations = 0;
    loop {
        let (value, grad) = probe_input_gradient(probe, h.view(), n_words, history, target, config.objective)?;
        let p = match config.objective {
            Objective::Probability => value,
            Objective::LogProbability => value.exp(),
        };
        trace.push(p);
        if iterations == config.steps || p > config.stop_above {
            break;
        }
        ascend(&mut h, &grad, config.epsilon, iterations)?;
        iterations += 1;
    }
    Ok(Perturbation {
        emb: emb.with_vectors(h)?,
        trace,
        iterations,
    })
}

fn ascend(h: &mut Array2<f64>, grad: &Array2<f64>, epsilon: f64, iteration: usize) -> Result<()> {
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { iteration });
    }
    if epsilon > 0.0 {
        Zip::from(h).and(grad).for_each(|x, &g| {
            if g != 0.0 {
                *x += epsilon * g;
            }
        });
    }
    Ok(())
}

/// Shared history and the reading's target: its actions from the divergence
/// up to the next GEN, or the GEN itself when that is where it diverges.
pub fn target_actions(item: &NpzItem, reading: Reading) -> Result<(Vec<Action>, Vec<Action>)> {
    let d = item.validate()?;
    let actions = item.actions(reading)?;
    let rest = &actions[d.index..];
    let len = match rest.iter().position(|&a| a == Action::Gen) {
        Some(0) => 1,
        Some(k) => k,
        None => rest.len(),
    };
    Ok((actions[..d.index].to_vec(), rest[..len].to_vec()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReadingEffect {
    pub target: String,
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Unperturbed minus perturbed surprisal, nats; positive means the
    /// continuation became more likely.
    pub effects: BTreeMap<Continuation, f64>,
    #[serde(skip)]
    pub perturbed: Option<EmbeddingMatrix>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterfactualEffect {
    pub item: String,
    pub layer: usize,
    pub readings: BTreeMap<Reading, ReadingEffect>,
}

pub fn counterfactual_effect<P: Differentiable>(
    item: &NpzItem,
    probe: &P,
    provider: &dyn EmbeddingProvider,
    layer: usize,
    config: &PerturbConfig,
) -> Result<CounterfactualEffect> {
    let prefix = &item.prefix_transitive;
    let emb = provider.hidden_states(&item.prefix_id(true), prefix, layer)?;
    let baseline: BTreeMap<Continuation, f64> = Continuation::ALL
        .iter()
        .map(|&c| Ok((c, provider.forward_from(layer, prefix, &emb, item.continuation(c))?.total)))
        .collect::<Result<_>>()?;
    let mut readings = BTreeMap::new();
    for reading in Reading::ALL {
        let (history, target) = target_actions(item, reading)?;
        // one word past the prefix keeps GEN a live alternative
        let p = perturb(&emb, probe, prefix.len() + 1, &history, &target, config)?;
        let mut effects = BTreeMap::new();
        for c in Continuation::ALL {
            let s = provider.forward_from(layer, prefix, &p.emb, item.continuation(c))?.total;
            effects.insert(c, baseline[&c] - s);
        }
        readings.insert(
            reading,
            ReadingEffect {
                target: codes(&target),
                trace: p.trace,
                iterations: p.iterations,
                effects,
                perturbed: Some(p.emb),
            },
        );
    }
    Ok(CounterfactualEffect {
        item: item.id.clone(),
        layer,
        readings,
    })
}

/// Dispatches on the checkpoint's architecture; reference probes have no
/// input gradient.
pub fn counterfactual_effect_loaded(
    item: &NpzItem,
    probe: &LoadedProbe,
    provider: &dyn EmbeddingProvider,
    layer: usize,
    config: &PerturbConfig,
) -> Result<CounterfactualEffect> {
    match probe {
        LoadedProbe::Gap(p) => counterfactual_effect(item, p, provider, layer, config),
        LoadedProbe::Map(p) => counterfactual_effect(item, p, provider, layer, config),
        LoadedProbe::Nap(p) => counterfactual_effect(item, p, provider, layer, config),
        LoadedProbe::Oracle(_) | LoadedProbe::Uniform(_) => {
            Err(Error::NotDifferentiable("reference probes have no input gradient".into()))
        }
    }
}

pub fn counterfactual_effects(
    items: &[NpzItem],
    probe: &LoadedProbe,
    provider: &dyn EmbeddingProvider,
    layer: usize,
    config: &PerturbConfig,
) -> Result<Vec<CounterfactualEffect>> {
    items
        .par_iter()
        .map(|item| counterfactual_effect_loaded(item, probe, provider, layer, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{PlantedProvider, StubLm, WithStubLm};
    use crate::nn::{sigmoid, uniform_matrix};
    use crate::npz::fixture_items;
    use crate::probes::{GapConfig, GapProbe, MapConfig, MapProbe};
    use crate::transition::Action::{Gen as G, LeftArc as L, RightArc as R};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn emb(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let v = uniform_matrix(n, dim, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        EmbeddingMatrix::new("x", 0, "t", v).unwrap()
    }

    #[test]
    fn zero_step_size_is_identity() {
        let map = MapProbe::new(6, &MapConfig { hidden: Some(5), ..MapConfig::default() });
        let e = emb(4, 6, 0);
        let config = PerturbConfig { epsilon: 0.0, ..PerturbConfig::default() };
        let p = perturb(&e, &map, 4, &[G, G, G], &[L], &config).unwrap();
        assert_eq!(p.emb, e);
        assert_eq!(p.iterations, 8);
        assert!(p.trace.windows(2).all(|w| w[0] == w[1]));
        assert!(perturb(&e, &map, 4, &[G, G, G], &[L], &PerturbConfig { epsilon: -1.0, ..config }).is_err());
    }

    #[test]
    fn single_step_matches_closed_form() {
        // identity projection: P(GEN) = sigmoid((|h1 - h2|^2 - tau) / beta)
        let dim = 3;
        let gap = GapProbe::new(dim, &GapConfig { tau: 1.5, beta: 2.0, ..GapConfig::default() })
            .unwrap()
            .with_projection(Array2::eye(dim))
            .unwrap();
        let e = emb(3, dim, 4);
        let eps = 0.1;
        let config = PerturbConfig { epsilon: eps, steps: 1, ..PerturbConfig::default() };
        let p = perturb(&e, &gap, 3, &[G, G], &[G], &config).unwrap();
        let (h2, h1) = (e.word(1).to_owned(), e.word(2).to_owned());
        let diff = &h1 - &h2;
        let x = (diff.dot(&diff) - 1.5) / 2.0;
        let s = sigmoid(x);
        let g1 = &diff * (s * (1.0 - s) * 2.0 / 2.0);
        let out = p.emb.vectors();
        for k in 0..dim {
            assert!((out[[1, k]] - (h1[k] + eps * g1[k])).abs() < 1e-14);
            assert!((out[[0, k]] - (h2[k] - eps * g1[k])).abs() < 1e-14);
            assert_eq!(out[[2, k]], e.vectors()[[2, k]]);
        }
        assert!((p.trace[0] - s).abs() < 1e-14);
    }

    #[test]
    fn small_steps_increase_probability() {
        for seed in 0..5 {
            let map = MapProbe::new(6, &MapConfig { hidden: Some(5), seed, ..MapConfig::default() });
            let e = emb(4, 6, seed);
            for objective in [Objective::Probability, Objective::LogProbability] {
                let config = PerturbConfig { epsilon: 1e-2, steps: 20, objective, ..PerturbConfig::default() };
                let p = perturb(&e, &map, 5, &[G, G, G, L], &[R], &config).unwrap();
                assert!(p.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", p.trace);
                // the target reads words 1 and 3 only
                assert_eq!(p.emb.word(2), e.word(2));
                assert_eq!(p.emb.word(4), e.word(4));
            }
        }
    }

    #[test]
    fn early_exit_above_threshold() {
        let map = MapProbe::new(6, &MapConfig { hidden: Some(5), ..MapConfig::default() });
        let e = emb(3, 6, 9);
        // with all words generated only RIGHT_ARC is valid beneath ROOT
        let p = perturb(&e, &map, 3, &[G, G, G, L, L], &[R], &PerturbConfig::default()).unwrap();
        assert_eq!(p.trace, vec![1.0]);
        assert_eq!(p.iterations, 0);
        assert_eq!(p.emb, e);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut h = Array2::from_elem((2, 2), -0.0);
        let mut grad = Array2::zeros((2, 2));
        grad[[1, 1]] = 2.0;
        ascend(&mut h, &grad, 0.5, 0).unwrap();
        assert_eq!(h[[1, 1]], 1.0);
        // untouched entries keep their bits, sign of zero included
        assert!(h[[0, 0]].is_sign_negative());
        grad[[0, 1]] = f64::NAN;
        let before = h.clone();
        assert!(matches!(ascend(&mut h, &grad, 0.5, 3), Err(Error::NonFiniteGradient { iteration: 3 })));
        assert_eq!(h, before);
    }

    #[test]
    fn targets_of_fixture_items() {
        for item in fixture_items() {
            let (history, np) = target_actions(&item, Reading::NP).unwrap();
            let (same, z) = target_actions(&item, Reading::Z).unwrap();
            assert_eq!(history, same);
            assert_eq!(np, vec![R]);
            assert_eq!(z, vec![G]);
        }
    }

    fn stub_provider() -> WithStubLm<PlantedProvider> {
        let mut planted = PlantedProvider::new(64, 0).unwrap();
        for item in fixture_items() {
            planted.register(&item.sentence_id(Reading::NP), item.tree(Reading::NP).unwrap());
        }
        WithStubLm::new(planted, StubLm::MeanActivation { layer: 0, scale: 3.0 })
    }

    #[test]
    fn zero_steps_have_no_effect() {
        let provider = stub_provider();
        let map = MapProbe::new(64, &MapConfig { hidden: Some(8), ..MapConfig::default() });
        let config = PerturbConfig { steps: 0, ..PerturbConfig::default() };
        for item in fixture_items() {
            let effect = counterfactual_effect(&item, &map, &provider, 0, &config).unwrap();
            for r in effect.readings.values() {
                assert_eq!(r.iterations, 0);
                assert!(r.effects.values().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn stub_effect_matches_closed_form() {
        use crate::nn::softplus;
        let provider = stub_provider();
        let map = MapProbe::new(64, &MapConfig { hidden: Some(8), seed: 2, ..MapConfig::default() });
        let config = PerturbConfig { epsilon: 5.0, steps: 3, ..PerturbConfig::default() };
        let item = &fixture_items()[0];
        let effect = counterfactual_effect(item, &map, &provider, 0, &config).unwrap();
        let before = provider.hidden_states("", &item.prefix_transitive, 0).unwrap().vectors().mean().unwrap();
        for r in effect.readings.values() {
            let after = r.perturbed.as_ref().unwrap().vectors().mean().unwrap();
            assert_ne!(before, after);
            let per_token = softplus(-3.0 * before) - softplus(-3.0 * after);
            for c in Continuation::ALL {
                let expected = per_token * item.continuation(c).len() as f64;
                assert!((r.effects[&c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn locality_for_local_probes() {
        let provider = stub_provider();
        let gap = GapProbe::new(64, &GapConfig { rank: Some(16), ..GapConfig::default() }).unwrap();
        let map = MapProbe::new(64, &MapConfig { hidden: Some(8), ..MapConfig::default() });
        let config = PerturbConfig { epsilon: 10.0, steps: 2, ..PerturbConfig::default() };
        for item in fixture_items() {
            let e = provider.hidden_states("", &item.prefix_transitive, 0).unwrap();
            let effects = [
                counterfactual_effect(&item, &gap, &provider, 0, &config).unwrap(),
                counterfactual_effect(&item, &map, &provider, 0, &config).unwrap(),
            ];
            for effect in effects {
                for r in effect.readings.values() {
                    let out = r.perturbed.as_ref().unwrap();
                    for row in 1..=e.n_words() {
                        let moved = out.word(row) != e.word(row);
                        let read = row == item.verb_index || row == item.np_head_index;
                        assert!(!moved || read, "row {row} of {} moved", item.id);
                    }
                }
            }
        }
    }
}
