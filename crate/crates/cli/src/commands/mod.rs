pub mod corpus;
pub mod experiments;
pub mod probe;
pub mod structural;

use std::path::Path;

use anyhow::{Context, Result};
use incparse::treebank::load_cache;
use incparse::Corpus;

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let corpus = load_cache(path).with_context(|| format!("loading corpus {}", path.display()))?;
    corpus.require_nonempty()?;
    Ok(corpus)
}

/// The development corpus, or the last tenth of `train` when none is given.
pub fn train_dev(train: &Path, dev: Option<&Path>) -> Result<(Corpus, Corpus)> {
    let mut train = load_corpus(train)?;
    let dev = match dev {
        Some(p) => load_corpus(p)?,
        None => {
            if train.len() < 2 {
                anyhow::bail!("need a --dev corpus when training on a single sentence");
            }
            let keep = train.len() - (train.len() / 10).max(1);
            let held = train.sentences.split_off(keep);
            Corpus::from_sentences(incparse::Split::Dev, &format!("{} (held out)", train.provenance.source), held)
        }
    };
    Ok((train, dev))
}
