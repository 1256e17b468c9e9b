use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// One caption of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub language: String,
    pub split: Split,
    pub tokens: Vec<String>,
}

impl CaptionRecord {
    pub fn new(image_id: &str, language: &str, split: Split, text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
        if image_id.is_empty() {
            return Err(Error::Data("caption record has an empty image id".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Data(format!("caption for image `{image_id}` has no tokens")));
        }
        Ok(CaptionRecord {
            image_id: image_id.to_string(),
            language: language.to_string(),
            split,
            tokens,
        })
    }
}

/// Lowercases and splits punctuation off words.
///
/// Corpora entering training are expected to be in this form already; the
/// prepare step applies it to raw captions.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
                current.push(ch);
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Parses `image_id TAB language TAB split TAB tokens` lines.
///
/// With `raw = true` the last field is free text passed through [`tokenize`].
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn parse_captions(input: impl BufRead, context: &str, raw: bool) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                context,
                format!("line {lineno}: expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let split: Split = fields[2]
            .parse()
            .map_err(|e: Error| Error::format(context, format!("line {lineno}: {e}")))?;
        let text = if raw { tokenize(fields[3]).join(" ") } else { fields[3].to_string() };
        let record = CaptionRecord::new(fields[0], fields[1], split, &text)
            .map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_captions(std::io::BufReader::new(f), &path.display().to_string(), false)
}

pub fn write_captions(records: &[CaptionRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.image_id, r.language, r.split, r.tokens.join(" "))?;
    }
    Ok(())
}

pub fn save_captions(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_captions(records, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn split_records(records: &[CaptionRecord], split: Split) -> Vec<CaptionRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("A man's Surf-board, on the BEACH."),
            ["a", "man's", "surf-board", ",", "on", "the", "beach", "."]
        );
    }

    #[test]
    fn parse_and_write_round_trip() {
        let text = "img1\ten\ttrain\ta dog runs\n\nimg2\tde\ttest\tein hund\n";
        let recs = parse_captions(text.as_bytes(), "mem", false).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].split, Split::Test);
        let mut out = Vec::new();
        write_captions(&recs, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text.replace("\n\n", "\n"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_captions("a\ten\ttrain\tx\nbroken line\n".as_bytes(), "f", false).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_captions("a\ten\tbogus\tx\n".as_bytes(), "f", false).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_captions("a\ten\ttrain\t   \n".as_bytes(), "f", false).unwrap_err();
        assert!(err.to_string().contains("no tokens"), "{err}");
    }
}
