//! Self-describing binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "MMLM" | version u16
//! config_len u32 | config TOML (utf-8)
//! hash 32 bytes (sha-256 of the config with max_epochs cleared)
//! vocab_len u32 | vocabulary file text
//! has_state u8 | [training state]
//! tensor_count u32 | tensor_count x (name_len u16 | name | rows u32 | cols u32 | rows*cols f32)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::lm::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{CurveRow, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MMLM";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl CheckpointConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("checkpoint config serializes")
    }

    /// Hash of everything that must match to resume; the epoch budget may change.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        if let Some(t) = c.train.as_mut() {
            t.max_epochs = 0;
        }
        Sha256::digest(c.to_toml().as_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub vocab: Vocabulary,
    pub model: Model<f32>,
    pub state: Option<TrainState>,
    pub hash: [u8; 32],
}

/// One tensor entry of [`Manifest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u16,
    pub config: CheckpointConfig,
    pub hash: String,
    pub vocab_size: usize,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!("format: MMLM v{}\nconfig_hash: {}\nvocab_size: {}\n", self.version, self.hash, self.vocab_size);
        if let Some(e) = self.epoch {
            out.push_str(&format!("epochs_completed: {e}\n"));
        }
        out.push_str("[config]\n");
        out.push_str(&self.config.to_toml());
        out.push_str("[tensors]\n");
        let w = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(0);
        for t in &self.tensors {
            out.push_str(&format!("{:<w$}  {} x {}\n", t.name, t.rows, t.cols));
        }
        out
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model<f32>, vocab: Vocabulary, train: Option<TrainConfig>, state: Option<TrainState>) -> Self {
        let config = CheckpointConfig {
            model: model.config().clone(),
            train,
        };
        let hash = config.hash();
        Checkpoint {
            config,
            vocab,
            model,
            state,
            hash,
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_u16::<LittleEndian>(VERSION)?;
        let config = self.config.to_toml();
        out.write_u32::<LittleEndian>(config.len() as u32)?;
        out.write_all(config.as_bytes())?;
        out.write_all(&self.hash)?;
        let mut vocab = Vec::new();
        self.vocab.write_to(&mut vocab)?;
        out.write_u32::<LittleEndian>(vocab.len() as u32)?;
        out.write_all(&vocab)?;
        match &self.state {
            None => out.write_u8(0)?,
            Some(s) => {
                out.write_u8(1)?;
                write_state(s, &mut out)?;
            }
        }
        let mut tensors: Vec<(&'static str, Tensor<f32>)> = Vec::new();
        self.model.for_each_param(|name, t| tensors.push((name, t.clone())));
        out.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, t) in tensors {
            out.write_u16::<LittleEndian>(name.len() as u16)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.rows() as u32)?;
            out.write_u32::<LittleEndian>(t.cols() as u32)?;
            for v in t.data() {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Writes to a temporary sibling then renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(input: impl Read, context: &str) -> Result<Self> {
        let (header, tensors, mut input) = read_header(input, context)?;
        let Header {
            config,
            hash,
            vocab,
            state,
        } = header;
        let mut model = Model::<f32>::init(config.model.clone(), 0)
            .map_err(|e| Error::format(context, format!("invalid model config: {e}")))?;
        let expected = model.param_names();
        let mut params = Vec::with_capacity(tensors.len());
        for (i, entry) in tensors.iter().enumerate() {
            if expected.get(i).copied() != Some(entry.name.as_str()) {
                return Err(Error::format(
                    context,
                    format!("tensor {} is `{}`, expected `{}`", i + 1, entry.name, expected.get(i).unwrap_or(&"<none>")),
                ));
            }
            let mut data = vec![0f32; entry.rows * entry.cols];
            input
                .read_f32_into::<LittleEndian>(&mut data)
                .map_err(|e| Error::format(context, format!("tensor `{}`: {e}", entry.name)))?;
            params.push(Tensor::from_vec(entry.rows, entry.cols, data)?);
        }
        if params.len() != expected.len() {
            return Err(Error::format(
                context,
                format!("checkpoint has {} tensors, model expects {}", params.len(), expected.len()),
            ));
        }
        model
            .set_params(&params)
            .map_err(|e| Error::format(context, format!("tensor shapes: {e}")))?;
        if vocab.len() != config.model.vocab {
            return Err(Error::format(
                context,
                format!("vocabulary has {} entries, model expects {}", vocab.len(), config.model.vocab),
            ));
        }
        Ok(Checkpoint {
            config,
            vocab,
            model,
            state,
            hash,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice(), &path.display().to_string())
    }

    /// Reads the header and tensor table without building the model.
    pub fn inspect(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, tensors, _) = read_header(bytes.as_slice(), &path.display().to_string())?;
        Ok(Manifest {
            version: VERSION,
            hash: hex(&header.hash),
            vocab_size: header.vocab.len(),
            epoch: header.state.as_ref().map(|s| s.epoch),
            config: header.config,
            tensors,
        })
    }

    /// Refuses to resume when the stored config differs from `config`.
    pub fn check_resumable(&self, config: &CheckpointConfig) -> Result<()> {
        if self.hash != config.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the requested config {}; refusing to resume",
                hex(&self.hash),
                hex(&config.hash())
            )));
        }
        Ok(())
    }
}

fn io_err<'a>(context: &'a str, what: &'a str) -> impl Fn(std::io::Error) -> Error + 'a {
    move |e| Error::format(context, format!("{what}: {e}"))
}

struct Header {
    config: CheckpointConfig,
    hash: [u8; 32],
    vocab: Vocabulary,
    state: Option<TrainState>,
}

/// Parses the whole file; tensor payloads come back concatenated in table order.
fn read_header<R: Read>(mut input: R, context: &str) -> Result<(Header, Vec<TensorEntry>, TensorReader)> {
    let err = |m: String| Error::format(context, m);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io_err(context, "header"))?;
    if &magic != MAGIC {
        return Err(err("not an MMLM checkpoint (bad magic)".into()));
    }
    let version = input.read_u16::<LittleEndian>().map_err(io_err(context, "header"))?;
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let config_len = input.read_u32::<LittleEndian>().map_err(io_err(context, "config"))? as usize;
    let mut config = vec![0u8; config_len];
    input.read_exact(&mut config).map_err(io_err(context, "config"))?;
    let config = String::from_utf8(config).map_err(|e| err(format!("config: {e}")))?;
    let config: CheckpointConfig = toml::from_str(&config).map_err(|e| err(format!("config: {e}")))?;
    let mut hash = [0u8; 32];
    input.read_exact(&mut hash).map_err(io_err(context, "config hash"))?;
    if hash != config.hash() {
        return Err(err("config hash does not match the stored config".into()));
    }
    let vocab_len = input.read_u32::<LittleEndian>().map_err(io_err(context, "vocabulary"))? as usize;
    let mut vocab = vec![0u8; vocab_len];
    input.read_exact(&mut vocab).map_err(io_err(context, "vocabulary"))?;
    let vocab = Vocabulary::read_from(vocab.as_slice(), &format!("{context} (vocabulary)"))?;
    let state = match input.read_u8().map_err(io_err(context, "state"))? {
        0 => None,
        1 => Some(read_state(&mut input).map_err(io_err(context, "training state"))?),
        other => return Err(err(format!("bad training-state flag {other}"))),
    };
    let count = input.read_u32::<LittleEndian>().map_err(io_err(context, "tensor table"))? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut payload = Vec::new();
    for i in 0..count {
        let name_len = input.read_u16::<LittleEndian>().map_err(io_err(context, "tensor name"))? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(io_err(context, "tensor name"))?;
        let name = String::from_utf8(name).map_err(|e| err(format!("tensor {}: {e}", i + 1)))?;
        let rows = input.read_u32::<LittleEndian>().map_err(io_err(context, &name))? as usize;
        let cols = input.read_u32::<LittleEndian>().map_err(io_err(context, &name))? as usize;
        let mut data = vec![0u8; rows * cols * 4];
        input.read_exact(&mut data).map_err(io_err(context, &name))?;
        payload.extend_from_slice(&data);
        entries.push(TensorEntry { name, rows, cols });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(io_err(context, "trailer"))?;
    if !rest.is_empty() {
        return Err(err(format!("{} trailing bytes after the tensor table", rest.len())));
    }
    Ok((
        Header {
            config,
            hash,
            vocab,
            state,
        },
        entries,
        TensorReader { data: payload, pos: 0 },
    ))
}

/// Concatenated tensor payloads in table order.
struct TensorReader {
    data: Vec<u8>,
    pos: usize,
}

impl Read for TensorReader {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = buf.len().min(self.data.len() - self.pos);
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

fn write_state(s: &TrainState, out: &mut impl Write) -> std::io::Result<()> {
    out.write_u64::<LittleEndian>(s.epoch as u64)?;
    out.write_f64::<LittleEndian>(s.lr)?;
    out.write_f64::<LittleEndian>(s.best_valid_ppl)?;
    match s.prev_valid_ppl {
        None => out.write_u8(0)?,
        Some(p) => {
            out.write_u8(1)?;
            out.write_f64::<LittleEndian>(p)?;
        }
    }
    out.write_u32::<LittleEndian>(s.increases)?;
    out.write_u32::<LittleEndian>(s.halvings)?;
    out.write_u32::<LittleEndian>(s.curve.len() as u32)?;
    for r in &s.curve {
        out.write_u64::<LittleEndian>(r.epoch as u64)?;
        for v in [r.train_nll, r.valid_nll, r.valid_ppl, r.lr] {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_state(input: &mut impl Read) -> std::io::Result<TrainState> {
    let epoch = input.read_u64::<LittleEndian>()? as usize;
    let lr = input.read_f64::<LittleEndian>()?;
    let best_valid_ppl = input.read_f64::<LittleEndian>()?;
    let prev_valid_ppl = match input.read_u8()? {
        0 => None,
        _ => Some(input.read_f64::<LittleEndian>()?),
    };
    let increases = input.read_u32::<LittleEndian>()?;
    let halvings = input.read_u32::<LittleEndian>()?;
    let n = input.read_u32::<LittleEndian>()? as usize;
    let mut curve = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let epoch = input.read_u64::<LittleEndian>()? as usize;
        let mut v = [0f64; 4];
        for x in &mut v {
            *x = input.read_f64::<LittleEndian>()?;
        }
        curve.push(CurveRow {
            epoch,
            train_nll: v[0],
            valid_nll: v[1],
            valid_ppl: v[2],
            lr: v[3],
        });
    }
    Ok(TrainState {
        epoch,
        lr,
        best_valid_ppl,
        prev_valid_ppl,
        increases,
        halvings,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::lm::FusionKind;

    fn sample(fusion: FusionKind) -> Checkpoint {
        let vocab = Vocabulary::build([["a", "b", "c"].as_slice()], 1).unwrap();
        let cfg = ModelConfig::new(CellKind::Lstm, 3, vocab.len(), fusion).with_context_dim(2);
        let model = Model::init(cfg, 4).unwrap();
        let train = TrainConfig::default();
        let mut state = TrainState::new(&train);
        state.update_schedule(9.5, &train);
        state.epoch = 1;
        state.curve.push(CurveRow {
            epoch: 1,
            train_nll: 2.5,
            valid_nll: 2.25,
            valid_ppl: 9.5,
            lr: 1.0,
        });
        Checkpoint::new(model, vocab, Some(train), Some(state))
    }

    #[test]
    fn round_trip_is_exact() {
        for fusion in [FusionKind::None, FusionKind::Outer] {
            let c = sample(fusion);
            let back = Checkpoint::read_from(c.to_bytes().as_slice(), "mem").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample(FusionKind::None).to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3], "m").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice(), "m").is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::read_from(long.as_slice(), "m").is_err());
    }

    #[test]
    fn hash_ignores_epoch_budget_only() {
        let c = sample(FusionKind::None);
        let mut more = c.config.clone();
        more.train.as_mut().unwrap().max_epochs = 99;
        assert!(c.check_resumable(&more).is_ok());
        more.train.as_mut().unwrap().learning_rate = 0.5;
        assert!(matches!(c.check_resumable(&more), Err(Error::Config(_))));
    }
}
