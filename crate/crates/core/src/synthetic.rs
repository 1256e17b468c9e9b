//! Seeded toy corpora for memorization and multi-modal experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{CaptionRecord, ContextStore, Split};
use crate::error::Result;

/// `n` distinct random-walk sentences of `min_len..=max_len` words over a
/// lexicon of `lexicon` words, all in the training split.
pub fn memorization_corpus(
    seed: u64,
    n: usize,
    lexicon: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<CaptionRecord> {
    let mut rng = crate::rng::stream(seed, "synthetic/memorize");
    let words: Vec<String> = (0..lexicon).map(|i| format!("w{i:02}")).collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(min_len..=max_len);
        let sentence: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..lexicon)].as_str()).collect();
        let text = sentence.join(" ");
        if seen.insert(text.clone()) {
            let id = format!("toy{:03}", out.len());
            out.push(CaptionRecord::new(&id, "toy", Split::Train, &text).expect("non-empty sentence"));
        }
    }
    out
}

/// A small stochastic phrase grammar over its own 30 words.
struct SubGrammar {
    det: Vec<String>,
    adj: Vec<String>,
    noun: Vec<String>,
    verb: Vec<String>,
    prep: Vec<String>,
}

impl SubGrammar {
    fn new(prefix: &str) -> Self {
        let class = |name: &str, n: usize| (0..n).map(|i| format!("{prefix}{name}{i}")).collect::<Vec<_>>();
        SubGrammar {
            det: class("det", 3),
            adj: class("adj", 6),
            noun: class("noun", 9),
            verb: class("verb", 7),
            prep: class("prep", 5),
        }
    }

    fn noun_phrase(&self, rng: &mut impl Rng, noun: usize, out: &mut Vec<String>) {
        out.push(self.det.choose(rng).expect("non-empty").clone());
        if rng.gen_bool(0.5) {
            out.push(self.adj.choose(rng).expect("non-empty").clone());
        }
        out.push(self.noun[noun % self.noun.len()].clone());
    }

    /// `NP VERB [PREP NP]`. The verb depends on the subject noun, the
    /// preposition on the verb, and the object noun on both, so predicting
    /// the object requires remembering the subject across several words.
    fn sentence(&self, rng: &mut impl Rng) -> Vec<String> {
        let mut out = Vec::new();
        let n = rng.gen_range(0..self.noun.len());
        self.noun_phrase(rng, n, &mut out);
        let v = (n + rng.gen_range(0..3)) % self.verb.len();
        out.push(self.verb[v].clone());
        if rng.gen_bool(0.8) {
            let p = (v + rng.gen_range(0..2)) % self.prep.len();
            out.push(self.prep[p].clone());
            let object = n + v + 1 + rng.gen_range(0..2);
            self.noun_phrase(rng, object, &mut out);
        }
        out
    }
}

/// Sentences from two disjoint sub-grammars, each paired with an image
/// whose `dim`-dimensional context vector is its grammar's centroid plus
/// Gaussian noise of standard deviation `noise`. The centroids are
/// `±1/sqrt(dim)` on alternating coordinates (unit norm), so the zero vector
/// sits between them.
#[derive(Debug, Clone)]
pub struct TwoGrammarCorpus {
    pub records: Vec<CaptionRecord>,
    pub contexts: ContextStore,
}

pub fn two_grammar_corpus(seed: u64, n: usize, dim: usize, noise: f64, valid_frac: f64) -> Result<TwoGrammarCorpus> {
    let mut rng = crate::rng::stream(seed, "synthetic/two-grammar");
    let grammars = [SubGrammar::new("a"), SubGrammar::new("b")];
    let normal = Normal::new(0.0, noise).map_err(|e| crate::Error::Config(e.to_string()))?;
    let mut contexts = ContextStore::new(dim);
    let mut records = Vec::with_capacity(n);
    let n_valid = (n as f64 * valid_frac).round() as usize;
    for i in 0..n {
        let g = i % 2;
        let sign = if g == 0 { 1.0 } else { -1.0 } / (dim as f64).sqrt();
        let vector: Vec<f32> = (0..dim)
            .map(|d| {
                let centroid = if d % 2 == 0 { sign } else { -sign };
                (centroid + normal.sample(&mut rng)) as f32
            })
            .collect();
        let id = format!("img{i:05}");
        contexts.insert(&id, vector)?;
        let split = if i < n - n_valid { Split::Train } else { Split::Valid };
        let text = grammars[g].sentence(&mut rng).join(" ");
        records.push(CaptionRecord::new(&id, "synthetic", split, &text)?);
    }
    Ok(TwoGrammarCorpus { records, contexts })
}
