use anyhow::{bail, Result};
use serde_json::json;

use incparse::data::fetch_examples;
use incparse::structural::{
    evaluate_structural, load_structural, mst_decode, pca_coords, save_structural, train_structural, StructuralConfig,
    StructuralKind,
};
use incparse::EmbeddingProvider;

use super::{load_corpus, train_dev};
use crate::args::{KindArg, StructuralCommand, StructuralEvalArgs, StructuralPcaArgs, StructuralTrainArgs};
use crate::output;
use crate::source::{provider, Trees};

pub fn structural(c: StructuralCommand, seed: u64) -> Result<()> {
    match c {
        StructuralCommand::Train(a) => train_cmd(a, seed),
        StructuralCommand::Eval(a) => eval_cmd(a, seed),
        StructuralCommand::Pca(a) => pca_cmd(a, seed),
    }
}

fn train_cmd(a: StructuralTrainArgs, seed: u64) -> Result<()> {
    let kind = match a.kind {
        KindArg::Distance => StructuralKind::Distance,
        KindArg::Depth => StructuralKind::Depth,
    };
    let (train, dev) = train_dev(&a.corpus, a.dev.as_deref())?;
    let source = provider(&a.source, seed, Trees::Corpora(&[&train, &dev]))?;
    let train_ex = fetch_examples(&train, source.as_ref(), a.layer)?;
    let dev_ex = fetch_examples(&dev, source.as_ref(), a.layer)?;
    let mut config = StructuralConfig {
        rank: a.rank,
        seed,
        ..StructuralConfig::default()
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    let (probe, report) = train_structural(&train_ex, &dev_ex, kind, a.layer, &config)?;
    save_structural(&a.out, &probe, source.model_tag(), seed)?;
    eprintln!("best dev loss {:.5} at epoch {}", report.best_dev_loss, report.best_epoch);
    output::json(&json!({
        "checkpoint": a.out,
        "kind": kind,
        "layer": a.layer,
        "rank": probe.projection.rank(),
        "report": report,
    }))
}

fn eval_cmd(a: StructuralEvalArgs, seed: u64) -> Result<()> {
    let (probe, header) = load_structural(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let source = provider(&a.source, seed, Trees::Corpora(&[&corpus]))?;
    let examples = fetch_examples(&corpus, source.as_ref(), header.layer)?;
    let eval = evaluate_structural(&probe, &examples)?;
    if let Some(path) = &a.tsv {
        output::tsv(
            path,
            &["kind", "layer", "rank", "sentences", "uuas", "root_accuracy", "spearman"],
            &[
                format!("{:?}", eval.kind).to_lowercase(),
                header.layer.to_string(),
                header.rank.to_string(),
                eval.sentences.to_string(),
                output::opt(eval.uuas),
                output::opt(eval.root_accuracy),
                output::opt(eval.spearman),
            ],
        )?;
    }
    output::json(&json!({ "layer": header.layer, "rank": header.rank, "eval": eval }))
}

fn pca_cmd(a: StructuralPcaArgs, seed: u64) -> Result<()> {
    let (probe, header) = load_structural(&a.ckpt)?;
    if probe.kind != StructuralKind::Distance {
        bail!("coordinates need a distance probe");
    }
    let corpus = load_corpus(&a.corpus)?;
    let sentences: Vec<_> = match &a.sentence_id {
        Some(id) => match corpus.get(id) {
            Some(s) => vec![s],
            None => bail!("sentence `{id}` is not in the corpus"),
        },
        None => corpus.sentences.iter().collect(),
    };
    let source = provider(&a.source, seed, Trees::Corpora(&[&corpus]))?;
    let mut rows = Vec::with_capacity(sentences.len());
    for s in sentences {
        let emb = source.hidden_states(&s.id, &s.words, header.layer)?;
        let d = probe.projection.pairwise(emb.vectors())?;
        let coords = pca_coords(d.mapv(f64::sqrt).view())?;
        rows.push(json!({
            "sentence_id": s.id,
            "words": s.words,
            "coords": coords.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "mst": mst_decode(d.view())?,
            "gold": s.tree.heads(),
        }));
    }
    output::json_lines(rows)
}
