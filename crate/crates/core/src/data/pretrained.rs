//! Word vectors composed from pretrained subword vectors.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Prefix marking a subword that continues a word.
pub const CONTINUATION: &str = "##";
pub const UNK_SUBWORD: &str = "[UNK]";

/// Subword vectors of a common dimension `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

/// How a word's vector was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Composition {
    /// Mean of these subword pieces.
    Segmented(Vec<String>),
    /// The word could not be segmented; the unknown-subword vector was used.
    Unknown,
}

impl PretrainedEmbeddings {
    pub fn new(dim: usize) -> Self {
        PretrainedEmbeddings {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, subword: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim("pretrained insert", (1, vector.len()), (1, self.dim)));
        }
        self.vectors.insert(subword.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, subword: &str) -> Option<&[f32]> {
        self.vectors.get(subword).map(Vec::as_slice)
    }

    /// First line `E`, then `subword v1 ... vE` per line.
    pub fn parse(input: impl BufRead, context: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format(context, "empty embeddings file"))?;
        let header = header.map_err(|e| Error::format(context, e.to_string()))?;
        let dim: usize = header
            .trim()
            .parse()
            .map_err(|_| Error::format(context, format!("line 1: expected dimension, found `{header}`")))?;
        let mut out = PretrainedEmbeddings::new(dim);
        for (n, line) in lines {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let Some(token) = parts.next() else { continue };
            let v = parts
                .map(str::parse::<f32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
            if v.len() != dim {
                return Err(Error::format(
                    context,
                    format!("line {lineno}: `{token}` has {} values, expected {dim}", v.len()),
                ));
            }
            out.vectors.insert(token.to_string(), v);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(f), &path.display().to_string())
    }

    /// Greedy longest-match segmentation; `None` if some position has no match.
    pub fn segment(&self, word: &str) -> Option<Vec<String>> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let piece = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
                if self.vectors.contains_key(&piece) {
                    found = Some((piece, end));
                    break;
                }
            }
            let (piece, end) = found?;
            pieces.push(piece);
            start = end;
        }
        Some(pieces)
    }

    /// Unweighted mean of the word's subword vectors.
    pub fn compose_word_embedding(&self, word: &str) -> Result<(Vec<f64>, Composition)> {
        if word.is_empty() {
            return Err(Error::Data("cannot compose an embedding for an empty word".into()));
        }
        match self.segment(word) {
            Some(pieces) => {
                let mut acc = vec![0f64; self.dim];
                for p in &pieces {
                    for (a, &v) in acc.iter_mut().zip(&self.vectors[p]) {
                        *a += f64::from(v);
                    }
                }
                let n = pieces.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                Ok((acc, Composition::Segmented(pieces)))
            }
            None => {
                let unk = self.get(UNK_SUBWORD).ok_or_else(|| {
                    Error::Lookup(format!("`{word}` cannot be segmented and no {UNK_SUBWORD} vector exists"))
                })?;
                Ok((unk.iter().map(|&v| f64::from(v)).collect(), Composition::Unknown))
            }
        }
    }
}

/// Counts from [`init_embeddings_from_pretrained`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitCoverage {
    /// Non-special vocabulary words.
    pub words: usize,
    /// Words initialized from their own subword pieces.
    pub segmented: usize,
    /// Words initialized from the unknown-subword vector.
    pub unknown: usize,
}

impl InitCoverage {
    /// Fraction of vocabulary words initialized from their own subwords.
    pub fn coverage(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.segmented as f64 / self.words as f64
        }
    }
}

/// Overwrites the column of `w` (`H x |V|`) for every non-special word with
/// its composed pretrained vector. When `E != H`, `projection_seed` must be
/// given; vectors then pass through a fixed seeded `H x E` random matrix.
pub fn init_embeddings_from_pretrained<T: Real>(
    w: &mut Tensor<T>,
    vocab: &Vocabulary,
    pretrained: &PretrainedEmbeddings,
    projection_seed: Option<u64>,
) -> Result<InitCoverage> {
    let (hidden, cols) = w.shape();
    if cols != vocab.len() {
        return Err(Error::dim("init_embeddings_from_pretrained", w.shape(), (hidden, vocab.len())));
    }
    let e = pretrained.dim();
    let projection: Option<Tensor<f64>> = match projection_seed {
        Some(seed) => {
            let mut rng = crate::rng::stream(seed, "init/projection");
            Some(Tensor::uniform(hidden, e, 1.0 / (e as f64).sqrt(), &mut rng))
        }
        None if e != hidden => {
            return Err(Error::Config(format!(
                "pretrained dimension {e} differs from hidden size {hidden}; enable the projection"
            )))
        }
        None => None,
    };

    let mut cov = InitCoverage {
        words: 0,
        segmented: 0,
        unknown: 0,
    };
    for (id, word) in vocab.words() {
        cov.words += 1;
        let (vector, how) = match pretrained.compose_word_embedding(word) {
            Ok(v) => v,
            Err(Error::Lookup(_)) => continue,
            Err(e) => return Err(e),
        };
        match how {
            Composition::Segmented(_) => cov.segmented += 1,
            Composition::Unknown => cov.unknown += 1,
        }
        let column: Vec<f64> = match &projection {
            Some(p) => Tensor::row_vector(vector).matmul_nt(p)?.into_data(),
            None => vector,
        };
        for (r, v) in column.into_iter().enumerate() {
            w.set(r, id, T::from_f64_lossy(v));
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "2\nplay 1 2\n##ing 3 -4\n##s 0.5 0.5\ncat 7 7\n[UNK] -1 -1\n";

    fn emb() -> PretrainedEmbeddings {
        PretrainedEmbeddings::parse(FILE.as_bytes(), "mem").unwrap()
    }

    #[test]
    fn whole_word_is_exact() {
        let (v, how) = emb().compose_word_embedding("cat").unwrap();
        assert_eq!(v, vec![7.0, 7.0]);
        assert_eq!(how, Composition::Segmented(vec!["cat".into()]));
    }

    #[test]
    fn two_pieces_average() {
        let (v, how) = emb().compose_word_embedding("playing").unwrap();
        assert_eq!(v, vec![(1.0 + 3.0) / 2.0, (2.0 - 4.0) / 2.0]);
        assert_eq!(how, Composition::Segmented(vec!["play".into(), "##ing".into()]));
    }

    #[test]
    fn unknown_word_falls_back() {
        let (v, how) = emb().compose_word_embedding("zebra").unwrap();
        assert_eq!((v, how), (vec![-1.0, -1.0], Composition::Unknown));
        assert!(matches!(emb().compose_word_embedding(""), Err(Error::Data(_))));
    }

    #[test]
    fn ragged_file_is_rejected() {
        assert!(PretrainedEmbeddings::parse("2\na 1 2 3\n".as_bytes(), "m").is_err());
        assert!(PretrainedEmbeddings::parse("x\n".as_bytes(), "m").is_err());
    }
}
