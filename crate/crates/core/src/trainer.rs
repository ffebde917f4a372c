//! Cross-entropy training of probes on gold action trajectories.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{embedding_dim, Example};
use crate::error::{Error, Result};
use crate::nn::{self, dropout_mask, Adam};
use crate::probes::{
    sequence_nll, Arch, Differentiable, GapConfig, GapProbe, LoadedProbe, MapConfig, MapProbe, NapConfig,
    NapProbe, Probe, StepFilter,
};
use crate::structural::{fit_projection, Objectives, Projection, StructuralConfig};
use crate::transition::{oracle, Action};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub layer: usize,
    /// Defaults to 1e-3, or 1e-5 for GAP after pretraining.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Dropout between layers.
    pub dropout: f64,
    /// Dropout on the embedding rows entering the probe.
    pub input_dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Option<usize>,
    pub features: Option<usize>,
    pub rank: Option<usize>,
    pub recurrent: usize,
    pub action_dim: usize,
    pub flip_arc_sign: bool,
    pub pretrain: StructuralConfig,
    pub train_path: Option<String>,
    pub dev_path: Option<String>,
    pub emb_path: Option<String>,
    pub out_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            arch: Arch::Map,
            layer: 0,
            lr: None,
            epochs: 40,
            patience: 3,
            min_delta: 1e-4,
            dropout: 0.2,
            input_dropout: 0.0,
            batch_size: 16,
            seed: 0,
            hidden: None,
            features: None,
            rank: None,
            recurrent: 200,
            action_dim: 32,
            flip_arc_sign: false,
            pretrain: StructuralConfig::default(),
            train_path: None,
            dev_path: None,
            emb_path: None,
            out_path: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.arch {
            Arch::Gap => 1e-5,
            _ => 1e-3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_nll: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_nll: f64,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Stops after `patience` consecutive observations that fail to beat the best
/// by more than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> EarlyStopping {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

struct Trajectory<'a> {
    example: &'a Example,
    actions: Vec<Action>,
}

fn trajectories(examples: &[Example]) -> Result<Vec<Trajectory<'_>>> {
    examples
        .iter()
        .map(|e| {
            Ok(Trajectory {
                example: e,
                actions: oracle(&e.sentence.tree)?.actions().to_vec(),
            })
        })
        .collect()
}

/// Mean per-action NLL of gold trajectories, every action counted.
pub fn mean_action_nll(probe: &dyn Probe, examples: &[Example]) -> Result<f64> {
    let (nll, count) = corpus_nll(probe, examples, StepFilter::All)?;
    Ok(nll / count as f64)
}

fn corpus_nll(probe: &dyn Probe, examples: &[Example], filter: StepFilter) -> Result<(f64, usize)> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per: Vec<Result<(f64, usize)>> = examples
        .par_iter()
        .map(|e| {
            let gold = oracle(&e.sentence.tree)?;
            let nll = sequence_nll(probe, &e.emb, e.sentence.n_words(), gold.actions(), filter)?;
            Ok((nll.value, nll.actions))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for r in per {
        let (v, c) = r?;
        total += v;
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no actions pass the step filter".into()));
    }
    Ok((total, count))
}

/// `exp` of the mean per-action NLL over gold actions, using the masked
/// distributions.
pub fn action_perplexity(probe: &dyn Probe, examples: &[Example], filter: StepFilter) -> Result<f64> {
    let (nll, count) = corpus_nll(probe, examples, filter)?;
    Ok((nll / count as f64).exp())
}

/// Adam on the mean per-action NLL with dev-based early stopping. Returns the
/// parameters of the best dev epoch.
pub fn train_probe<P: Differentiable>(
    init: P,
    train: &[Example],
    dev: &[Example],
    config: &TrainConfig,
) -> Result<(P, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dev = if dev.is_empty() { train } else { dev };
    let start = Instant::now();
    let data = trajectories(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate());
    let mut probe = init;
    let mut best = probe.clone();
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut log = TrainLog::default();
    stopper.observe(mean_action_nll(&probe, dev)?);
    log.best_dev_nll = stopper.best();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        let mut epoch_actions = 0;
        for (step, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let mut grads = probe.zeros_like();
            let mut batch_ll = 0.0;
            let mut batch_actions = 0;
            for &k in batch {
                let t = &data[k];
                let mut sentence_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let n = t.example.sentence.n_words();
                let vectors = t.example.emb.vectors();
                let masked: Array2<f64>;
                let emb = if config.input_dropout > 0.0 {
                    masked = &vectors * &dropout_mask(vectors.dim(), config.input_dropout, &mut sentence_rng);
                    masked.view()
                } else {
                    vectors
                };
                let pass = probe.backward(
                    emb,
                    n,
                    &t.actions,
                    0..t.actions.len(),
                    Some(&mut sentence_rng),
                    Some(&mut grads),
                )?;
                batch_ll += pass.log_likelihood;
                batch_actions += t.actions.len();
            }
            if !batch_ll.is_finite() || !nn::all_finite(&grads) {
                return Err(Error::Divergence { epoch, step });
            }
            nn::scale(&mut grads, -1.0 / batch_actions as f64);
            adam.step(&mut probe, &grads);
            probe.project();
            epoch_nll -= batch_ll;
            epoch_actions += batch_actions;
        }
        let dev_nll = mean_action_nll(&probe, dev)?;
        if !dev_nll.is_finite() {
            return Err(Error::Divergence { epoch, step: 0 });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: epoch_nll / epoch_actions as f64,
            dev_nll,
            wallclock: start.elapsed().as_secs_f64(),
        });
        let (improved, stop) = stopper.observe(dev_nll);
        if improved {
            best = probe.clone();
            log.best_epoch = epoch;
            log.best_dev_nll = dev_nll;
        }
        if stop {
            break;
        }
    }
    Ok((best, log))
}

/// Fits `B` to the summed distance and depth regression losses.
pub fn pretrain_gap(
    train: &[Example],
    dev: &[Example],
    rank: Option<usize>,
    config: &StructuralConfig,
) -> Result<Projection> {
    let dim = embedding_dim(train)?;
    let init = Projection::random(rank.unwrap_or(dim), dim, config.init_bound, config.seed)?;
    Ok(fit_projection(init, train, dev, Objectives::JOINT, config)?.0)
}

/// Builds the configured architecture and trains it.
pub fn train(train: &[Example], dev: &[Example], config: &TrainConfig) -> Result<(LoadedProbe, TrainLog)> {
    let dim = embedding_dim(train)?;
    Ok(match config.arch {
        Arch::Gap => {
            let proj = pretrain_gap(train, dev, config.rank, &config.pretrain)?;
            let gap = GapProbe::new(
                dim,
                &GapConfig {
                    rank: Some(proj.rank()),
                    flip_arc_sign: config.flip_arc_sign,
                    seed: config.seed,
                    ..GapConfig::default()
                },
            )?
            .with_projection(proj.0)?;
            let (p, log) = train_probe(gap, train, dev, config)?;
            (LoadedProbe::Gap(p), log)
        }
        Arch::Map => {
            let map = MapProbe::new(
                dim,
                &MapConfig {
                    hidden: config.hidden,
                    features: config.features,
                    dropout: config.dropout,
                    seed: config.seed,
                },
            );
            let (p, log) = train_probe(map, train, dev, config)?;
            (LoadedProbe::Map(p), log)
        }
        Arch::Nap => {
            let nap = NapProbe::new(
                dim,
                &NapConfig {
                    recurrent: config.recurrent,
                    action_dim: config.action_dim,
                    hidden: config.hidden,
                    features: config.features,
                    dropout: config.dropout,
                    seed: config.seed,
                },
            );
            let (p, log) = train_probe(nap, train, dev, config)?;
            (LoadedProbe::Nap(p), log)
        }
        Arch::Oracle | Arch::Uniform => {
            return Err(Error::InvalidInput(format!("{} probes are not trained", config.arch)))
        }
    })
}
