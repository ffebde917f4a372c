//! CoNLL-U ingestion, projectivity filtering and the on-disk corpus cache.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transition::{oracle, ActionSequence, DependencyTree};

pub const CORPUS_FILE: &str = "corpus.json";

/// A handful of hand-annotated sentences, one of them non-projective and one
/// with two roots.
pub const FIXTURE_CONLLU: &str = include_str!("../fixtures/tiny.conllu");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
    pub upos: Vec<String>,
    pub tree: DependencyTree,
}

impl Sentence {
    pub fn new(id: impl Into<String>, upos: Vec<String>, tree: DependencyTree) -> Result<Sentence> {
        if upos.len() != tree.n_words() {
            return Err(Error::InvalidInput(format!(
                "{} tags for {} words",
                upos.len(),
                tree.n_words()
            )));
        }
        Ok(Sentence {
            id: id.into(),
            words: tree.words().to_vec(),
            upos,
            tree,
        })
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn is_punct(&self, word: usize) -> bool {
        is_punct_tag(&self.upos[word - 1])
    }
}

pub fn is_punct_tag(upos: &str) -> bool {
    upos == "PUNCT"
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub read: usize,
    pub dropped_nonprojective: usize,
    pub dropped_multiroot: usize,
    pub dropped_cyclic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub split: Split,
    pub provenance: Provenance,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn from_sentences(split: Split, source: &str, sentences: Vec<Sentence>) -> Corpus {
        Corpus {
            split,
            provenance: Provenance {
                source: source.to_string(),
                read: sentences.len(),
                ..Provenance::default()
            },
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyCorpus)
        } else {
            Ok(())
        }
    }
}

pub fn load_conllu(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_conllu(&text, path, split)
}

struct Pending {
    id: Option<String>,
    first_line: usize,
    words: Vec<String>,
    upos: Vec<String>,
    heads: Vec<usize>,
}

impl Pending {
    fn new() -> Pending {
        Pending {
            id: None,
            first_line: 0,
            words: Vec::new(),
            upos: Vec::new(),
            heads: Vec::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Parses CoNLL-U text. Multi-word token ranges and empty nodes are skipped;
/// multi-root, cyclic and non-projective sentences are dropped and counted.
/// Fails with [`Error::EmptyCorpus`] only when the text holds no sentences at
/// all; a corpus whose sentences were all filtered out is returned empty.
pub fn parse_conllu(text: &str, path: &Path, split: Split) -> Result<Corpus> {
    let mut provenance = Provenance {
        source: path.display().to_string(),
        ..Provenance::default()
    };
    let mut sentences = Vec::new();
    let mut pending = Pending::new();

    let parse_err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };

    let mut finish = |pending: Pending, provenance: &mut Provenance| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        provenance.read += 1;
        let n = pending.words.len();
        if let Some(&h) = pending.heads.iter().find(|&&h| h > n) {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: pending.first_line,
                message: format!("head {h} out of range for a {n}-word sentence"),
            });
        }
        if pending.heads.iter().filter(|&&h| h == 0).count() != 1 {
            provenance.dropped_multiroot += 1;
            return Ok(());
        }
        let tree = match DependencyTree::new(pending.heads, pending.words) {
            Ok(tree) => tree,
            Err(_) => {
                provenance.dropped_cyclic += 1;
                return Ok(());
            }
        };
        if !tree.is_projective() {
            provenance.dropped_nonprojective += 1;
            return Ok(());
        }
        let id = pending
            .id
            .unwrap_or_else(|| format!("s{}", provenance.read));
        sentences.push(Sentence::new(id, pending.upos, tree)?);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            let done = std::mem::replace(&mut pending, Pending::new());
            finish(done, &mut provenance)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(id) = comment.trim().strip_prefix("sent_id") {
                let id = id.trim_start().trim_start_matches('=').trim();
                if !id.is_empty() {
                    pending.id = Some(id.to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(parse_err(
                line_no,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id_col = cols[0];
        if id_col.contains('-') || id_col.contains('.') {
            continue;
        }
        let id: usize = id_col
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid token id `{id_col}`")))?;
        if id != pending.words.len() + 1 {
            return Err(parse_err(
                line_no,
                format!("expected token id {}, found {id}", pending.words.len() + 1),
            ));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| parse_err(line_no, format!("invalid HEAD `{}`", cols[6])))?;
        if pending.is_empty() {
            pending.first_line = line_no;
        }
        pending.words.push(cols[1].to_string());
        pending.upos.push(cols[3].to_string());
        pending.heads.push(head);
    }
    finish(pending, &mut provenance)?;

    if provenance.read == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        split,
        provenance,
        sentences,
    })
}

pub fn fixture_corpus() -> Corpus {
    parse_conllu(FIXTURE_CONLLU, Path::new("fixtures/tiny.conllu"), Split::Train).expect("shipped fixture is valid")
}

/// Writes sentences back out as CoNLL-U (unlabeled; relation column is `dep`).
pub fn write_conllu(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for sentence in sentences {
        writeln!(out, "# sent_id = {}", sentence.id).unwrap();
        for (i, word) in sentence.words.iter().enumerate() {
            let head = sentence.tree.heads()[i];
            let rel = if head == 0 { "root" } else { "dep" };
            writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                word,
                sentence.upos[i],
                head,
                rel
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

/// Pairs every sentence with its oracle trajectory.
pub fn gold_trajectories(corpus: &Corpus) -> Result<Vec<(&Sentence, ActionSequence)>> {
    corpus.require_nonempty()?;
    corpus
        .sentences
        .iter()
        .map(|s| Ok((s, oracle(&s.tree)?)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CachedSentence {
    id: String,
    words: Vec<String>,
    upos: Vec<String>,
    heads: Vec<usize>,
    actions: String,
}

#[derive(Serialize, Deserialize)]
struct CachedCorpus {
    split: Split,
    provenance: Provenance,
    sentences: Vec<CachedSentence>,
}

/// Writes `corpus.json` (sentences, trees and trajectories) into `dir`.
pub fn save_cache(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let sentences = gold_trajectories(corpus)?
        .into_iter()
        .map(|(s, actions)| CachedSentence {
            id: s.id.clone(),
            words: s.words.clone(),
            upos: s.upos.clone(),
            heads: s.tree.heads().to_vec(),
            actions: actions.codes(),
        })
        .collect();
    let cached = CachedCorpus {
        split: corpus.split,
        provenance: corpus.provenance.clone(),
        sentences,
    };
    let path = dir.join(CORPUS_FILE);
    let mut json = serde_json::to_string_pretty(&cached)?;
    json.push('\n');
    fs::write(&path, json)?;
    Ok(path)
}

/// Loads a corpus cache directory (or a `corpus.json` path directly).
pub fn load_cache(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join(CORPUS_FILE)
    } else {
        path.to_path_buf()
    };
    let cached: CachedCorpus = serde_json::from_str(&fs::read_to_string(&file)?)?;
    let sentences = cached
        .sentences
        .into_iter()
        .map(|c| {
            let tree = DependencyTree::new(c.heads, c.words)?;
            let expected = oracle(&tree)?;
            if expected.codes() != c.actions {
                return Err(Error::Schema(format!(
                    "cached trajectory for `{}` does not match its tree",
                    c.id
                )));
            }
            Sentence::new(c.id, c.upos, tree)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        split: cached.split,
        provenance: cached.provenance,
        sentences,
    })
}
