//! Per-image context vectors, ingested from text or binary files.
//!
//! Binary layout (little endian):
//!
//! ```text
//! "MMCV" | version u16 | D u32 | count u64 | count x (id_len u16 | id utf-8 | D x f32)
//! ```

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const CONTEXT_MAGIC: &[u8; 4] = b"MMCV";
pub const CONTEXT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextFormat {
    Text,
    Binary,
}

/// Image id to fixed-dimension vector map. Insertion order is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl ContextStore {
    pub fn new(dim: usize) -> Self {
        ContextStore {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn insert(&mut self, id: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "context `{id}` has dimension {}, store expects {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(id) {
            return Err(Error::Data(format!("duplicate context id `{id}`")));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.vectors.push(vector);
        Ok(())
    }

    /// Vector for `id`; a missing id is an error, never a default.
    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.index
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::Data(format!("no context vector for image `{id}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Keeps only the ids accepted by `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut out = ContextStore::new(self.dim);
        for (id, v) in self.iter() {
            if keep(id) {
                out.insert(id, v.to_vec()).expect("ids are unique");
            }
        }
        out
    }

    /// `image_id TAB v1 SPACE v2 ...` lines; dimension taken from the first record.
    pub fn parse_text(input: impl BufRead, context: &str) -> Result<Self> {
        let mut store: Option<ContextStore> = None;
        let mut record = 0usize;
        for (n, line) in input.lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            record += 1;
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(context, format!("line {lineno}: expected `id<TAB>values`")))?;
            let vector = values
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::format(context, format!("line {lineno}: {e}")))?;
            let store = store.get_or_insert_with(|| ContextStore::new(vector.len()));
            if vector.len() != store.dim {
                return Err(Error::format(
                    context,
                    format!(
                        "record {record} (line {lineno}): dimension {} differs from {}",
                        vector.len(),
                        store.dim
                    ),
                ));
            }
            store
                .insert(id, vector)
                .map_err(|e| Error::format(context, format!("record {record} (line {lineno}): {e}")))?;
        }
        store.ok_or_else(|| Error::format(context, "no context records"))
    }

    pub fn read_binary(mut input: impl Read, context: &str) -> Result<Self> {
        let fmt_err = |m: String| Error::format(context, m);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| fmt_err(format!("header: {e}")))?;
        if &magic != CONTEXT_MAGIC {
            return Err(fmt_err("bad magic, expected MMCV".into()));
        }
        let version = input.read_u16::<LittleEndian>().map_err(|e| fmt_err(e.to_string()))?;
        if version != CONTEXT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let dim = input.read_u32::<LittleEndian>().map_err(|e| fmt_err(e.to_string()))? as usize;
        let count = input.read_u64::<LittleEndian>().map_err(|e| fmt_err(e.to_string()))?;
        let mut store = ContextStore::new(dim);
        for record in 1..=count {
            let rec_err = |e: std::io::Error| fmt_err(format!("record {record}: {e}"));
            let len = input.read_u16::<LittleEndian>().map_err(rec_err)? as usize;
            let mut id = vec![0u8; len];
            input.read_exact(&mut id).map_err(rec_err)?;
            let id = String::from_utf8(id).map_err(|e| fmt_err(format!("record {record}: {e}")))?;
            let mut v = vec![0f32; dim];
            input.read_f32_into::<LittleEndian>(&mut v).map_err(rec_err)?;
            store
                .insert(&id, v)
                .map_err(|e| fmt_err(format!("record {record}: {e}")))?;
        }
        Ok(store)
    }

    pub fn write_text(&self, mut out: impl Write) -> std::io::Result<()> {
        for (id, v) in self.iter() {
            let values: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{id}\t{}", values.join(" "))?;
        }
        Ok(())
    }

    pub fn write_binary(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(CONTEXT_MAGIC)?;
        out.write_u16::<LittleEndian>(CONTEXT_VERSION)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        out.write_u64::<LittleEndian>(self.len() as u64)?;
        for (id, v) in self.iter() {
            out.write_u16::<LittleEndian>(id.len() as u16)?;
            out.write_all(id.as_bytes())?;
            for x in v {
                out.write_f32::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, format: ContextFormat) -> Result<()> {
        let mut buf = Vec::new();
        match format {
            ContextFormat::Text => self.write_text(&mut buf),
            ContextFormat::Binary => self.write_binary(&mut buf),
        }
        .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Loads a context store; `None` sniffs the format from the magic bytes.
pub fn load_context_vectors(path: &Path, format: Option<ContextFormat>) -> Result<ContextStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let format = format.unwrap_or(if bytes.starts_with(CONTEXT_MAGIC) {
        ContextFormat::Binary
    } else {
        ContextFormat::Text
    });
    match format {
        ContextFormat::Binary => ContextStore::read_binary(bytes.as_slice(), &context),
        ContextFormat::Text => ContextStore::parse_text(bytes.as_slice(), &context),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn infers_dimension() {
        let s = ContextStore::parse_text("a\t1 2 3 4\nb\t0 0 0 0.5\n".as_bytes(), "m").unwrap();
        assert_eq!((s.dim(), s.len()), (4, 2));
        assert_eq!(s.get("b").unwrap(), &[0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn ragged_record_reports_index() {
        let err = ContextStore::parse_text("a\t1 2 3 4\nb\t1 2 3\n".as_bytes(), "m").unwrap_err();
        assert!(err.to_string().contains("record 2"), "{err}");
    }

    #[test]
    fn duplicates_and_missing_ids_are_errors() {
        assert!(ContextStore::parse_text("a\t1\na\t2\n".as_bytes(), "m").is_err());
        let s = ContextStore::parse_text("a\t1\n".as_bytes(), "m").unwrap();
        assert!(matches!(s.get("zzz"), Err(Error::Data(_))));
    }

    #[test]
    fn bad_binary_header() {
        assert!(ContextStore::read_binary(&b"NOPE\x01\x00"[..], "m").is_err());
        assert!(ContextStore::read_binary(&b"MMCV\x02\x00"[..], "m").is_err());
    }

    proptest! {
        #[test]
        fn text_and_binary_encodings_agree(
            rows in proptest::collection::vec(proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 3), 1..6)
        ) {
            let mut store = ContextStore::new(3);
            for (i, r) in rows.iter().enumerate() {
                store.insert(&format!("img{i}"), r.clone()).unwrap();
            }
            let mut text = Vec::new();
            store.write_text(&mut text).unwrap();
            let mut bin = Vec::new();
            store.write_binary(&mut bin).unwrap();
            let from_text = ContextStore::parse_text(text.as_slice(), "t").unwrap();
            let from_bin = ContextStore::read_binary(bin.as_slice(), "b").unwrap();
            for ((_, a), (_, b)) in from_text.iter().zip(from_bin.iter()) {
                let a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(&from_bin, &store);
        }
    }
}
