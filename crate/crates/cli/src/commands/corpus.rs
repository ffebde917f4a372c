use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use incparse::embedding::{PlantedProvider, ServiceClient, StoreWriter};
use incparse::synth::{synth_corpus, SynthConfig};
use incparse::treebank::{load_conllu, save_cache};
use incparse::{EmbeddingProvider, Split};

use super::load_corpus;
use crate::args::{EmbedCommand, ExportArgs, IngestArgs, PlantedArgs, SynthArgs};
use crate::output;
use crate::source::parse_layers;

pub fn ingest(a: IngestArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let corpus = load_conllu(&a.conllu, split).with_context(|| format!("reading {}", a.conllu.display()))?;
    corpus.require_nonempty()?;
    let path = save_cache(&corpus, &a.out)?;
    eprintln!("kept {} of {} sentences", corpus.len(), corpus.provenance.read);
    output::json(&json!({
        "corpus": path,
        "split": corpus.split,
        "sentences": corpus.len(),
        "provenance": corpus.provenance,
    }))
}

pub fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let split: Split = a.split.parse()?;
    let config = SynthConfig {
        sentences: a.sentences,
        min_words: a.min_words,
        max_words: a.max_words,
        seed,
    };
    let corpus = synth_corpus(split, &config)?;
    let path = save_cache(&corpus, &a.out)?;
    output::json(&json!({ "corpus": path, "split": split, "sentences": corpus.len() }))
}

pub fn embed(c: EmbedCommand, seed: u64) -> Result<()> {
    match c {
        EmbedCommand::Export(a) => export(a),
        EmbedCommand::Planted(a) => planted(a, seed),
    }
}

fn export(a: ExportArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let layers = parse_layers(&a.layers)?;
    let client = ServiceClient::connect(&a.endpoint, &a.model)?;
    for &l in &layers {
        client.check_layer(l)?;
    }
    let mut writer = StoreWriter::create(&a.out, client.model_tag(), client.dim(), layers.clone())?;
    // bounded chunks keep memory flat on large treebanks
    for chunk in corpus.sentences.chunks(64) {
        let fetched: Vec<_> = chunk
            .par_iter()
            .map(|s| client.embed(&s.id, &s.words, &layers))
            .collect();
        for (s, matrices) in chunk.iter().zip(fetched) {
            for m in matrices? {
                writer.put(&s.words, &m)?;
            }
        }
    }
    let manifest = writer.finish()?;
    output::json(&json!({ "store": a.out, "sentences": manifest.sentences.len(), "layers": manifest.layers, "dim": manifest.dim }))
}

fn planted(a: PlantedArgs, seed: u64) -> Result<()> {
    let layers = parse_layers(&a.layers)?;
    let mut provider = PlantedProvider::new(a.dim, seed)?.with_layers(layers.clone());
    let corpora = a.corpus.iter().map(|p| load_corpus(p)).collect::<Result<Vec<_>>>()?;
    for c in &corpora {
        provider.extend_from_corpus(c);
    }
    let mut writer = StoreWriter::create(&a.out, provider.model_tag(), a.dim, layers.clone())?;
    let mut count = 0;
    for s in corpora.iter().flat_map(|c| &c.sentences) {
        for &l in &layers {
            writer.put(&s.words, &provider.hidden_states(&s.id, &s.words, l)?)?;
        }
        count += 1;
    }
    writer.finish()?;
    output::json(&json!({ "store": a.out, "sentences": count, "layers": layers, "dim": a.dim }))
}
