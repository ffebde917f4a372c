mod common;

use std::collections::BTreeSet;

use common::*;
use incparse::data::{fetch_examples, Example};
use incparse::embedding::PlantedProvider;
use incparse::nn::{flatten, unflatten};
use incparse::probes::checkpoint::{checkpoint_bytes, CheckpointMeta};
use incparse::probes::{Arch, Differentiable, OracleProbe, Probe, StepFilter};
use incparse::structural::{depth_loss, distance_loss, mst_decode, sentence_dspr, Projection};
use incparse::synth::{synth_corpus, SynthConfig};
use incparse::trainer::{action_perplexity, train, TrainConfig};
use incparse::transition::{execute, for_each_terminal_sequence, ActionSequence};
use incparse::{DependencyTree, EmbeddingMatrix, ParseState, Sentence, Split, ROOT};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Norm of the difference over the larger norm.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central<F: Fn(&[f64]) -> f64>(x: &[f64], h: f64, f: &F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Smallest relative error over a few step sizes; ReLU kinks can sit inside
/// the wider stencils.
fn fd_error<F: Fn(&[f64]) -> f64>(analytic: &[f64], x: &[f64], f: F) -> f64 {
    [1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&h| relative_error(analytic, &central(x, h, &f)))
        .fold(f64::INFINITY, f64::min)
}

/// Parameter and input gradient errors of the log-likelihood of a random
/// terminal sequence.
fn gradient_errors<P: Differentiable>(probe: &P, n: usize, dim: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let actions = random_terminal(n, &mut r);
    let emb = random_matrix(n, dim, 1.0, &mut r);
    let steps = 0..actions.len();
    let mut grads = probe.zeros_like();
    let pass = probe
        .backward(emb.view(), n, &actions, steps.clone(), None, Some(&mut grads))
        .unwrap();

    let params = flatten(probe);
    let param_error = fd_error(&flatten(&grads), &params, |p| {
        let mut q = probe.clone();
        unflatten(&mut q, p);
        q.backward(emb.view(), n, &actions, steps.clone(), None, None).unwrap().log_likelihood
    });

    let flat: Vec<f64> = emb.iter().copied().collect();
    let analytic: Vec<f64> = pass.input.iter().copied().collect();
    let input_error = fd_error(&analytic, &flat, |v| {
        let e = Array2::from_shape_vec((n, dim), v.to_vec()).unwrap();
        probe.backward(e.view(), n, &actions, steps.clone(), None, None).unwrap().log_likelihood
    });
    (param_error, input_error)
}

fn probes(dim: usize, seed: u64) -> Vec<Box<dyn Probe>> {
    vec![Box::new(gap(dim, seed)), Box::new(map(dim, seed)), Box::new(nap(dim, seed))]
}

/// Every state along a random terminal path, with the history that reaches it.
fn path_states(n: usize, seed: u64) -> Vec<(Vec<incparse::Action>, ParseState)> {
    let actions = random_terminal(n, &mut rng(seed));
    let mut state = ParseState::initial(n).unwrap();
    let mut out = Vec::new();
    for (k, &a) in actions.iter().enumerate() {
        out.push((actions[..k].to_vec(), state.clone()));
        state = state.apply(a).unwrap();
    }
    out
}

fn at(probe: &dyn Probe, history: &[incparse::Action], state: &ParseState, emb: &EmbeddingMatrix) -> [f64; 3] {
    let mut memory = probe.begin();
    for &a in history {
        memory = probe.advance(&memory, a);
    }
    probe.log_dist(&memory, state, emb).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masked_distributions_are_normalized(n in 1usize..10, dim in 2usize..8, seed in any::<u64>()) {
        let emb = random_emb(n, dim, &mut rng(seed ^ 1));
        for probe in probes(dim, seed) {
            for (history, state) in path_states(n, seed) {
                let lp = at(probe.as_ref(), &history, &state, &emb);
                let valid = state.valid_actions();
                let mut total = 0.0;
                for a in incparse::Action::ALL {
                    let p = lp[a.index()].exp();
                    if valid.contains(a) {
                        prop_assert!(p >= 0.0);
                    } else {
                        prop_assert_eq!(p, 0.0);
                    }
                    total += p;
                }
                prop_assert!((total - 1.0).abs() < 1e-12, "{:?} sums to {}", probe.arch(), total);
                prop_assert_eq!(lp, at(probe.as_ref(), &history, &state, &emb));
            }
        }
    }

    #[test]
    fn gap_unmasked_distribution_sums_to_one(dim in 2usize..12, seed in any::<u64>(), scale in 0.01f64..30.0) {
        let mut r = rng(seed);
        let probe = gap(dim, seed);
        let h = random_matrix(2, dim, scale, &mut r);
        let lp = probe.unmasked_log_probs(h.row(0), h.row(1));
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probes_read_only_generated_rows(n in 2usize..10, dim in 2usize..6, seed in any::<u64>()) {
        let mut r = rng(seed ^ 7);
        let emb = random_emb(n, dim, &mut r);
        for probe in probes(dim, seed) {
            for (history, state) in path_states(n, seed) {
                let base = at(probe.as_ref(), &history, &state, &emb);
                let mut v = emb.vectors().to_owned();
                for row in state.generated()..n {
                    v.row_mut(row).fill(r.random_range(-5.0..5.0));
                }
                prop_assert_eq!(base, at(probe.as_ref(), &history, &state, &emb.with_vectors(v).unwrap()));
                if probe.arch() == Arch::Nap {
                    continue;
                }
                // stack-local probes read s1 and s2 only
                let top: BTreeSet<usize> = [Some(state.s1()), state.s2()].into_iter().flatten().filter(|&w| w != ROOT).collect();
                let mut v = emb.vectors().to_owned();
                for row in 0..n {
                    if !top.contains(&(row + 1)) {
                        v.row_mut(row).fill(r.random_range(-5.0..5.0));
                    }
                }
                prop_assert_eq!(base, at(probe.as_ref(), &history, &state, &emb.with_vectors(v).unwrap()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_finite_differences(n in 1usize..6, dim in 2usize..5, seed in any::<u64>()) {
        for (arch, (param, input)) in [
            (Arch::Gap, gradient_errors(&gap(dim, seed), n, dim, seed)),
            (Arch::Map, gradient_errors(&map(dim, seed), n, dim, seed)),
            (Arch::Nap, gradient_errors(&nap(dim, seed), n, dim, seed)),
        ] {
            prop_assert!(param < 1e-4, "{} parameter gradient error {}", arch, param);
            prop_assert!(input < 1e-4, "{} input gradient error {}", arch, input);
        }
    }

    #[test]
    fn structural_gradients_match_finite_differences(n in 2usize..8, dim in 2usize..6, rank in 1usize..4, seed in any::<u64>()) {
        let rank = rank.min(dim);
        let mut r = rng(seed);
        let tree = execute(&ActionSequence::new(n, random_terminal(n, &mut r))).unwrap();
        let h = random_matrix(n, dim, 1.0, &mut r);
        let b = random_matrix(rank, dim, 1.0, &mut r);
        for loss in [distance_loss, depth_loss] {
            let (_, grad) = loss(&Projection::new(b.clone()).unwrap(), h.view(), &tree).unwrap();
            let flat: Vec<f64> = b.iter().copied().collect();
            let analytic: Vec<f64> = grad.iter().copied().collect();
            let error = fd_error(&analytic, &flat, |v| {
                let p = Projection::new(Array2::from_shape_vec((rank, dim), v.to_vec()).unwrap()).unwrap();
                loss(&p, h.view(), &tree).unwrap().0
            });
            prop_assert!(error < 1e-4, "error {}", error);
        }
    }
}

fn tree_metric(tree: &DependencyTree) -> Array2<f64> {
    let n = tree.n_words();
    let d = tree.distance_matrix();
    Array2::from_shape_fn((n, n), |(i, j)| d[i][j] as f64)
}

fn edge_set(edges: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect()
}

#[test]
fn mst_recovers_every_tree_from_its_metric() {
    for n in 2..=8 {
        let mut seen = BTreeSet::new();
        for_each_terminal_sequence(n, |actions| {
            let tree = execute(&ActionSequence::new(n, actions.to_vec())).unwrap();
            if seen.insert(tree.heads().to_vec()) {
                let mst = mst_decode(tree_metric(&tree).view()).unwrap();
                assert_eq!(edge_set(&mst), edge_set(&tree.undirected_edges()), "{:?}", tree.heads());
            }
        })
        .unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mst_recovers_nonprojective_trees(n in 2usize..14, seed in any::<u64>()) {
        let mut r = rng(seed);
        // random recursive tree: each word attaches to an earlier-placed node
        let mut order: Vec<usize> = (1..=n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let mut heads = vec![0; n];
        for k in 1..n {
            heads[order[k] - 1] = order[r.random_range(0..k)];
        }
        let tree = DependencyTree::from_heads(heads).unwrap();
        let mst = mst_decode(tree_metric(&tree).view()).unwrap();
        prop_assert_eq!(edge_set(&mst), edge_set(&tree.undirected_edges()));
    }

    #[test]
    fn dspr_and_mst_ignore_positive_affine_rescaling(
        n in 5usize..14,
        seed in any::<u64>(),
        a in 0.1f64..10.0,
        b in -1.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let tree = execute(&ActionSequence::new(n, random_terminal(n, &mut r))).unwrap();
        let x = random_matrix(n, 4, 1.0, &mut r);
        let pred = Projection::identity(4).pairwise(x.view()).unwrap();
        let scaled = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { a * pred[[i, j]] + b });
        let before = sentence_dspr(pred.view(), &tree).unwrap();
        let after = sentence_dspr(scaled.view(), &tree).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
        let upos = vec!["NOUN".to_string(); n];
        let sentence = Sentence::new("s", upos, tree.clone()).unwrap();
        let e1 = mst_decode(pred.view()).unwrap();
        let e2 = mst_decode(scaled.view()).unwrap();
        prop_assert_eq!(edge_set(&e1), edge_set(&e2));
        prop_assert_eq!(
            incparse::structural::uuas(&e1, &sentence),
            incparse::structural::uuas(&e2, &sentence)
        );
    }
}

fn examples(sentences: usize, dim: usize, seed: u64) -> Vec<Example> {
    let config = SynthConfig {
        sentences,
        min_words: 4,
        max_words: 12,
        seed,
    };
    let corpus = synth_corpus(Split::Train, &config).unwrap();
    let provider = PlantedProvider::from_corpus(&corpus, dim, seed).unwrap();
    fetch_examples(&corpus, &provider, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn perplexity_is_at_least_one(seed in any::<u64>()) {
        let data = examples(6, 64, seed);
        for probe in probes(64, seed) {
            for filter in [StepFilter::All, StepFilter::FullyAmbiguous] {
                match action_perplexity(probe.as_ref(), &data, filter) {
                    Ok(ppl) => prop_assert!(ppl >= 1.0),
                    Err(e) => prop_assert!(filter == StepFilter::FullyAmbiguous, "{}", e),
                }
            }
        }
        let corpus = incparse::Corpus::from_sentences(Split::Train, "t", data.iter().map(|e| e.sentence.clone()).collect());
        let oracle = OracleProbe::from_corpus(&corpus);
        prop_assert_eq!(action_perplexity(&oracle, &data, StepFilter::All).unwrap(), 1.0);
    }
}

fn trained_bytes(arch: Arch, data: &[Example], seed: u64) -> Vec<u8> {
    let config = TrainConfig {
        arch,
        epochs: 2,
        hidden: Some(8),
        features: Some(6),
        recurrent: 6,
        action_dim: 4,
        dropout: 0.3,
        input_dropout: 0.1,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let (dev, train_set) = data.split_at(3);
    let (probe, _) = train(train_set, dev, &config).unwrap();
    let meta = CheckpointMeta {
        seed,
        model_tag: "planted".into(),
        ..CheckpointMeta::default()
    };
    checkpoint_bytes(&probe, &meta).unwrap()
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let data = examples(16, 64, 3);
    for arch in [Arch::Gap, Arch::Map, Arch::Nap] {
        let first = trained_bytes(arch, &data, 11);
        let again = trained_bytes(arch, &data, 11);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| trained_bytes(arch, &data, 11));
        assert_eq!(first, again, "{arch}");
        assert_eq!(first, single, "{arch}");
        assert_ne!(first, trained_bytes(arch, &data, 12), "{arch}");
    }
}

#[test]
fn inference_ignores_dropout() {
    let data = examples(8, 64, 5);
    let config = TrainConfig {
        arch: Arch::Map,
        epochs: 1,
        hidden: Some(8),
        dropout: 0.5,
        input_dropout: 0.5,
        ..TrainConfig::default()
    };
    let (probe, _) = train(&data, &[], &config).unwrap();
    let probe = probe.as_probe();
    let e = &data[0];
    let n = e.sentence.n_words();
    for (history, state) in path_states(n, 1) {
        let once = at(probe, &history, &state, &e.emb);
        assert_eq!(once, at(probe, &history, &state, &e.emb));
    }
    let a = action_perplexity(probe, &data, StepFilter::All).unwrap();
    assert_eq!(a, action_perplexity(probe, &data, StepFilter::All).unwrap());
}
