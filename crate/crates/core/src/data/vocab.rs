use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id bijection with four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    min_count: u64,
}

impl Vocabulary {
    fn with_specials(min_count: u64) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            counts: vec![0; NUM_SPECIALS],
            index,
            min_count,
        }
    }

    /// Counts tokens and keeps those seen at least `min_count` times, ordered
    /// by descending frequency with lexicographic tie-break.
    pub fn build<'a, I, S>(sentences: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut seen_any = false;
        for sentence in sentences {
            for tok in sentence {
                seen_any = true;
                *freq.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Self::with_specials(min_count);
        for (tok, count) in kept {
            vocab.index.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Non-special `(id, token)` pairs in id order.
    pub fn words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, t)| (i, t.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect()
    }

    /// Writes `# min_count=N` followed by `token TAB count` lines in id order.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# min_count={}", self.min_count)?;
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(out, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_from(input: impl BufRead, context: &str) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(context, "empty vocabulary file"))?
            .map_err(|e| Error::format(context, e.to_string()))?;
        let min_count = header
            .strip_prefix("# min_count=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format(context, "missing `# min_count=` header"))?;
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
            min_count,
        };
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::format(context, e.to_string()))?;
            let lineno = n + 2;
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(context, format!("line {lineno}: expected `token<TAB>count`")))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::format(context, format!("line {lineno}: bad count `{count}`")))?;
            let id = vocab.tokens.len();
            if id < NUM_SPECIALS && tok != SPECIAL_TOKENS[id] {
                return Err(Error::format(context, format!("line {lineno}: expected special `{}`", SPECIAL_TOKENS[id])));
            }
            if vocab.index.insert(tok.to_string(), id).is_some() {
                return Err(Error::format(context, format!("line {lineno}: duplicate token `{tok}`")));
            }
            vocab.tokens.push(tok.to_string());
            vocab.counts.push(count);
        }
        if vocab.tokens.len() < NUM_SPECIALS {
            return Err(Error::format(context, "vocabulary is missing special tokens"));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    fn build(lines: &[&str], min: u64) -> Vocabulary {
        let c = corpus(lines);
        Vocabulary::build(c.iter().map(Vec::as_slice), min).unwrap()
    }

    #[test]
    fn frequency_order_and_threshold() {
        let v = build(&["a a b"], 1);
        assert_eq!(v.words().map(|(_, t)| t).collect::<Vec<_>>(), ["a", "b"]);
        let v = build(&["a a b"], 2);
        assert_eq!(v.words().map(|(_, t)| t).collect::<Vec<_>>(), ["a"]);
        assert_eq!(v.id_or_unk("b"), UNK);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build(&["d c b a", "c d"], 1);
        assert_eq!(v.words().map(|(_, t)| t).collect::<Vec<_>>(), ["c", "d", "a", "b"]);
    }

    #[test]
    fn deterministic_and_empty_corpus() {
        let lines = ["the cat sat", "the dog sat on the mat"];
        assert_eq!(build(&lines, 1), build(&lines, 1));
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(matches!(
            Vocabulary::build(empty.iter().map(Vec::as_slice), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = build(&["x y y z z z"], 1);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = Vocabulary::read_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(v, back);
    }
}
