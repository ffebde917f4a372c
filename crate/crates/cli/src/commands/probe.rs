use std::fs;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use incparse::beam::{decode, evaluate_parser, BeamConfig, Parse};
use incparse::data::fetch_examples;
use incparse::probes::checkpoint::CheckpointMeta;
use incparse::probes::{load_checkpoint, save_checkpoint, Arch, LoadedProbe, OracleProbe, UniformProbe};
use incparse::trainer::{train, TrainConfig, TrainLog};
use incparse::EmbeddingProvider;

use super::{load_corpus, train_dev};
use crate::args::{ArchArg, BeamArgs, EvalArgs, ParseArgs, ProbeCommand, TrainArgs};
use crate::output;
use crate::source::{provider, Trees};

pub fn probe(c: ProbeCommand, seed: Option<u64>) -> Result<()> {
    match c {
        ProbeCommand::Train(a) => train_cmd(a, seed),
        ProbeCommand::Eval(a) => eval_cmd(a, seed.unwrap_or(0)),
    }
}

fn arch(a: ArchArg) -> Arch {
    match a {
        ArchArg::Gap => Arch::Gap,
        ArchArg::Map => Arch::Map,
        ArchArg::Nap => Arch::Nap,
        ArchArg::Oracle => Arch::Oracle,
        ArchArg::Uniform => Arch::Uniform,
    }
}

fn beam(b: BeamArgs) -> BeamConfig {
    BeamConfig {
        k_action: b.k_action,
        k_word: b.k_word,
        k_out: b.k_out,
    }
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
            .with_context(|| format!("parsing training config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    config.arch = arch(a.arch);
    if let Some(l) = a.layer {
        config.layer = l;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if a.lr.is_some() {
        config.lr = a.lr;
    }
    if let Some(d) = a.input_dropout {
        config.input_dropout = d;
    }
    if a.hidden.is_some() {
        config.hidden = a.hidden;
        config.features = a.hidden;
    }
    config.train_path = Some(a.corpus.display().to_string());
    config.dev_path = a.dev.as_ref().map(|p| p.display().to_string());
    config.emb_path = a.source.emb.as_ref().map(|p| p.display().to_string());

    let (train_corpus, dev_corpus) = train_dev(&a.corpus, a.dev.as_deref())?;
    let (probe, log, model_tag) = match config.arch {
        Arch::Oracle => {
            let mut oracle = OracleProbe::from_corpus(&train_corpus);
            for s in &dev_corpus.sentences {
                oracle.insert(&s.id, s.tree.clone());
            }
            (LoadedProbe::Oracle(oracle), TrainLog::default(), "gold".to_string())
        }
        Arch::Uniform => (LoadedProbe::Uniform(UniformProbe), TrainLog::default(), "none".to_string()),
        _ => {
            let source = provider(&a.source, config.seed, Trees::Corpora(&[&train_corpus, &dev_corpus]))?;
            let train_ex = fetch_examples(&train_corpus, source.as_ref(), config.layer)?;
            let dev_ex = fetch_examples(&dev_corpus, source.as_ref(), config.layer)?;
            let (probe, log) = train(&train_ex, &dev_ex, &config)?;
            (probe, log, source.model_tag().to_string())
        }
    };
    let meta = CheckpointMeta {
        layer: config.layer,
        model_tag,
        seed: config.seed,
        input_dropout: config.input_dropout,
        hyperparams: serde_json::to_value(&config)?,
    };
    save_checkpoint(&a.out, &probe, &meta)?;
    if let Some(path) = &a.log {
        output::write_file(path, log.to_json_lines()?)?;
    }
    eprintln!(
        "trained {} for {} epochs; best dev NLL {:.4} at epoch {}",
        config.arch,
        log.epochs.len(),
        log.best_dev_nll,
        log.best_epoch
    );
    output::json(&json!({
        "checkpoint": a.out,
        "arch": config.arch,
        "layer": config.layer,
        "epochs": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_dev_nll": log.best_dev_nll,
        "dev_nll": log.epochs.iter().map(|e| e.dev_nll).collect::<Vec<_>>(),
    }))
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let (probe, header) = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let source = provider(&a.source, seed, Trees::Corpora(&[&corpus]))?;
    let examples = fetch_examples(&corpus, source.as_ref(), header.layer)?;
    let report = evaluate_parser(probe.as_probe(), &examples, beam(a.beam))?;
    if let Some(path) = &a.tsv {
        output::tsv(
            path,
            &["arch", "layer", "sentences", "coverage", "uas", "action_ppl"],
            &[
                header.arch.to_string(),
                header.layer.to_string(),
                report.sentences.to_string(),
                report.coverage.to_string(),
                output::opt(report.uas),
                report.action_ppl.to_string(),
            ],
        )?;
    }
    eprintln!("UAS {} over {} sentences, action perplexity {:.4}", output::opt(report.uas), report.decoded, report.action_ppl);
    output::json(&json!({
        "arch": header.arch,
        "layer": header.layer,
        "beam": beam(a.beam),
        "report": report,
    }))
}

#[derive(Serialize)]
struct ParseRow {
    sentence_id: String,
    parses: Vec<Parse>,
}

pub fn parse(a: ParseArgs, seed: u64) -> Result<()> {
    let (probe, header) = load_checkpoint(&a.ckpt)?;
    let corpus = a.corpus.as_deref().map(load_corpus).transpose()?;
    let corpora: Vec<&incparse::Corpus> = corpus.iter().collect();
    let source = provider(&a.source, seed, Trees::Corpora(&corpora))?;
    let store_words = |id: &str| -> Option<Vec<String>> {
        a.source
            .emb
            .as_ref()
            .and_then(|d| incparse::embedding::EmbeddingStore::open(d).ok())
            .and_then(|s| s.sentence(id).map(|e| e.words.clone()))
    };
    let targets: Vec<(String, Vec<String>)> = match (&a.sentence_id, &corpus) {
        (Some(id), Some(c)) => match c.get(id) {
            Some(s) => vec![(id.clone(), s.words.clone())],
            None => bail!("sentence `{id}` is not in the corpus"),
        },
        (Some(id), None) => match store_words(id) {
            Some(words) => vec![(id.clone(), words)],
            None => bail!("sentence `{id}` is not in the embedding store"),
        },
        (None, Some(c)) => c.sentences.iter().map(|s| (s.id.clone(), s.words.clone())).collect(),
        (None, None) => match &a.source.emb {
            Some(dir) => incparse::embedding::EmbeddingStore::open(dir)?
                .manifest()
                .sentences
                .iter()
                .map(|s| (s.id.clone(), s.words.clone()))
                .collect(),
            None => bail!("pass --sentence-id, --corpus or --emb to choose sentences"),
        },
    };
    let config = beam(a.beam);
    let rows = targets
        .par_iter()
        .map(|(id, words)| {
            let emb = source.hidden_states(id, words, header.layer)?;
            Ok(ParseRow {
                sentence_id: id.clone(),
                parses: decode(probe.as_probe(), &emb, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    output::json_lines(rows)
}
