//! A small probabilistic grammar that emits projective, UD-style dependency
//! trees over an English-like lexicon.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transition::DependencyTree;
use crate::treebank::{Corpus, Sentence, Split};

const DETS: &[&str] = &["the", "a", "this", "every", "some"];
const ADJS: &[&str] = &["old", "quiet", "red", "small", "busy", "famous", "green"];
const NOUNS: &[&str] = &[
    "band", "party", "dog", "house", "river", "teacher", "letter", "garden", "city", "song", "market", "child",
];
const VERBS: &[&str] = &["saw", "left", "found", "liked", "visited", "heard", "watched", "painted"];
const INTRANSITIVE: &[&str] = &["slept", "arrived", "laughed", "waited", "fell"];
const ADPS: &[&str] = &["in", "near", "with", "from", "under"];
const ADVS: &[&str] = &["quickly", "again", "yesterday", "slowly"];
const SCONJS: &[&str] = &["when", "after", "because"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            sentences: 200,
            min_words: 4,
            max_words: 24,
            seed: 0,
        }
    }
}

#[derive(Default)]
struct Builder {
    words: Vec<String>,
    upos: Vec<String>,
    heads: Vec<usize>,
}

impl Builder {
    /// Appends a token with an unresolved head; returns its 1-based id.
    fn push(&mut self, word: &str, upos: &str) -> usize {
        self.words.push(word.to_string());
        self.upos.push(upos.to_string());
        self.heads.push(usize::MAX);
        self.words.len()
    }

    fn attach(&mut self, dependent: usize, head: usize) {
        self.heads[dependent - 1] = head;
    }

    fn noun_phrase(&mut self, rng: &mut ChaCha8Rng, depth: usize) -> usize {
        let det = rng.random_bool(0.8).then(|| self.push(DETS.choose(rng).unwrap(), "DET"));
        let n_adj = [0, 0, 0, 1, 1, 2].choose(rng).copied().unwrap();
        let adjs: Vec<usize> = (0..n_adj).map(|_| self.push(ADJS.choose(rng).unwrap(), "ADJ")).collect();
        let noun = self.push(NOUNS.choose(rng).unwrap(), "NOUN");
        for d in det.into_iter().chain(adjs) {
            self.attach(d, noun);
        }
        if depth < 2 && rng.random_bool(0.25) {
            let pp = self.prepositional(rng, depth + 1);
            self.attach(pp, noun);
        } else if depth < 1 && rng.random_bool(0.1) {
            let that = self.push("that", "PRON");
            let verb = self.push(INTRANSITIVE.choose(rng).unwrap(), "VERB");
            self.attach(that, verb);
            self.attach(verb, noun);
        }
        noun
    }

    /// Case-marked nominal: the preposition depends on the noun.
    fn prepositional(&mut self, rng: &mut ChaCha8Rng, depth: usize) -> usize {
        let adp = self.push(ADPS.choose(rng).unwrap(), "ADP");
        let noun = self.noun_phrase(rng, depth);
        self.attach(adp, noun);
        noun
    }

    fn clause(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let subj = self.noun_phrase(rng, 0);
        let verb = if rng.random_bool(0.7) {
            let verb = self.push(VERBS.choose(rng).unwrap(), "VERB");
            let obj = self.noun_phrase(rng, 0);
            self.attach(obj, verb);
            verb
        } else {
            self.push(INTRANSITIVE.choose(rng).unwrap(), "VERB")
        };
        self.attach(subj, verb);
        if rng.random_bool(0.3) {
            let pp = self.prepositional(rng, 1);
            self.attach(pp, verb);
        }
        if rng.random_bool(0.2) {
            let adv = self.push(ADVS.choose(rng).unwrap(), "ADV");
            self.attach(adv, verb);
        }
        verb
    }

    fn sentence(&mut self, rng: &mut ChaCha8Rng) -> usize {
        let sub = rng.random_bool(0.2).then(|| {
            let mark = self.push(SCONJS.choose(rng).unwrap(), "SCONJ");
            let verb = self.clause(rng);
            self.attach(mark, verb);
            verb
        });
        let main = self.clause(rng);
        if let Some(sub) = sub {
            self.attach(sub, main);
        }
        let punct = self.push(".", "PUNCT");
        self.attach(punct, main);
        self.attach(main, 0);
        main
    }
}

fn one_sentence(id: String, rng: &mut ChaCha8Rng, config: &SynthConfig) -> Result<Sentence> {
    loop {
        let mut b = Builder::default();
        b.sentence(rng);
        let n = b.words.len();
        if n < config.min_words || n > config.max_words {
            continue;
        }
        debug_assert!(b.heads.iter().all(|&h| h != usize::MAX));
        let tree = DependencyTree::new(b.heads, b.words)?;
        return Sentence::new(id, b.upos, tree);
    }
}

/// Sentences `{prefix}-{i:05}`, reproducible from the seed alone.
pub fn generate(prefix: &str, config: &SynthConfig) -> Result<Vec<Sentence>> {
    if config.min_words < 3 || config.min_words > config.max_words {
        return Err(Error::InvalidInput(format!(
            "word range {}..={} is not satisfiable",
            config.min_words, config.max_words
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.sentences)
        .map(|i| one_sentence(format!("{prefix}-{i:05}"), &mut rng, config))
        .collect()
}

pub fn synth_corpus(split: Split, config: &SynthConfig) -> Result<Corpus> {
    let prefix = format!("synth-{split}");
    let sentences = generate(&prefix, config)?;
    Ok(Corpus::from_sentences(split, &format!("synth:seed={}", config.seed), sentences))
}
