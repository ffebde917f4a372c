use anyhow::{bail, Context, Result};

use incparse::embedding::{EmbeddingStore, PlantedProvider, ServiceClient, StubLm, WithStubLm};
use incparse::npz::{planted_provider, NpzItem};
use incparse::{Corpus, EmbeddingProvider};

use crate::args::SourceArgs;

/// Gold trees available to the planted encoder.
pub enum Trees<'a> {
    Corpora(&'a [&'a Corpus]),
    Items(&'a [NpzItem]),
}

fn parse_stub(spec: &str) -> Result<StubLm> {
    let parts: Vec<&str> = spec.split(':').collect();
    Ok(match parts.as_slice() {
        ["uniform", vocab] => StubLm::Uniform { vocab_size: vocab.parse().context("stub vocabulary size")? },
        ["mean", layer, scale] => StubLm::MeanActivation {
            layer: layer.parse().context("stub layer")?,
            scale: scale.parse().context("stub scale")?,
        },
        _ => bail!("unknown stub language model `{spec}`; expected uniform:VOCAB or mean:LAYER:SCALE"),
    })
}

pub fn provider(args: &SourceArgs, seed: u64, trees: Trees<'_>) -> Result<Box<dyn EmbeddingProvider>> {
    let base: Box<dyn EmbeddingProvider> = if let Some(dir) = &args.emb {
        Box::new(EmbeddingStore::open(dir).with_context(|| format!("opening embedding store {}", dir.display()))?)
    } else if let Some(dim) = args.planted_dim {
        match trees {
            Trees::Corpora(corpora) => {
                let mut p = PlantedProvider::new(dim, seed)?;
                for c in corpora {
                    p.extend_from_corpus(c);
                }
                Box::new(p)
            }
            Trees::Items(items) => Box::new(planted_provider(items, dim, seed)?),
        }
    } else if let Some(endpoint) = &args.endpoint {
        Box::new(ServiceClient::connect(endpoint, &args.model)?)
    } else {
        bail!("no embedding source: pass --emb, --planted-dim or --endpoint (or set INCPARSE_ENDPOINT)");
    };
    Ok(match &args.stub_lm {
        Some(spec) => Box::new(WithStubLm::new(base, parse_stub(spec)?)),
        None => base,
    })
}

/// `a..b` (inclusive) or `a,b,c`.
pub fn parse_layers(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().context("layer range start")?;
        let b: usize = b.trim_start_matches('=').trim().parse().context("layer range end")?;
        if a > b {
            bail!("empty layer range `{spec}`");
        }
        return Ok((a..=b).collect());
    }
    let mut layers = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad layer `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}
