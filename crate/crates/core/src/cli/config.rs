//! Run configuration file.
//!
//! ```toml
//! [data]
//! dir = "prepared"            # optional; supplies the three files below
//! captions = "prepared/captions.tsv"
//! contexts = "prepared/contexts.mmcv"
//! vocab = "prepared/vocab.txt"
//! language = "en"             # optional filter
//! pretrained = "subwords.txt" # optional subword embeddings
//! projection = true           # project pretrained vectors when E != H
//!
//! [model]
//! arch = "delta-rnn"          # delta-rnn | gru | lstm
//! hidden = 256
//! fusion = "outer"            # none | inner | outer
//!
//! [train]
//! learning_rate = 1.0
//! max_epochs = 15
//! seed = 7
//!
//! [output]
//! dir = "runs/en-outer"
//! ```
//!
//! Relative paths are resolved against the config file's directory. The
//! vocabulary size and context dimension come from the data files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::lm::{FusionKind, ModelConfig};
use crate::tensor::ActivationKind;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "MMLM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub language: Option<String>,
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: CellKind,
    pub hidden: usize,
    #[serde(default = "no_fusion")]
    pub fusion: FusionKind,
    #[serde(default = "yes")]
    pub fusion_bias: bool,
    #[serde(default = "yes")]
    pub decoder_bias: bool,
    pub lstm_activation: Option<ActivationKind>,
}

fn no_fusion() -> FusionKind {
    FusionKind::None
}
fn yes() -> bool {
    true
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: CellKind::DeltaRnn,
            hidden: 256,
            fusion: FusionKind::None,
            fusion_bias: true,
            decoder_bias: true,
            lstm_activation: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// Values from the command line; `Some` wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub contexts: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub language: Option<String>,
    pub pretrained: Option<PathBuf>,
    pub projection: bool,
    pub arch: Option<CellKind>,
    pub hidden: Option<usize>,
    pub fusion: Option<FusionKind>,
    pub learning_rate: Option<f64>,
    pub clip: Option<f64>,
    pub batch_size: Option<usize>,
    pub unroll: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Fully resolved paths of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedData {
    pub captions: PathBuf,
    pub vocab: PathBuf,
    pub contexts: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    /// Parses a config file. A seed absent from the file falls back to the
    /// environment, then to 0.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let seed_in_file = raw.get("train").and_then(|t| t.get("seed")).is_some();
        let mut cfg: RunConfig = raw.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
        if !seed_in_file {
            cfg.train.seed = env_seed()?.unwrap_or(0);
        }
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut cfg.data.dir);
        resolve(&mut cfg.data.captions);
        resolve(&mut cfg.data.contexts);
        resolve(&mut cfg.data.vocab);
        resolve(&mut cfg.data.pretrained);
        resolve(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Defaults plus the environment seed, for runs without a file.
    pub fn from_env() -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.train.seed = env_seed()?.unwrap_or(0);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        set_opt(&mut self.data.dir, &o.data_dir);
        set_opt(&mut self.data.captions, &o.captions);
        set_opt(&mut self.data.contexts, &o.contexts);
        set_opt(&mut self.data.vocab, &o.vocab);
        set_opt(&mut self.data.language, &o.language);
        set_opt(&mut self.data.pretrained, &o.pretrained);
        self.data.projection |= o.projection;
        set(&mut self.model.arch, &o.arch);
        set(&mut self.model.hidden, &o.hidden);
        set(&mut self.model.fusion, &o.fusion);
        set(&mut self.train.learning_rate, &o.learning_rate);
        set(&mut self.train.clip, &o.clip);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.train.unroll, &o.unroll);
        set(&mut self.train.max_epochs, &o.epochs);
        set(&mut self.train.seed, &o.seed);
        set_opt(&mut self.output.dir, &o.out);
    }

    /// Checks the numbers and that every referenced input exists.
    pub fn validate(&self) -> Result<(ResolvedData, PathBuf)> {
        self.train.validate()?;
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be at least 1".into()));
        }
        let from_dir = |name: &str| self.data.dir.as_ref().map(|d| d.join(name));
        let captions = self
            .data
            .captions
            .clone()
            .or_else(|| from_dir("captions.tsv"))
            .ok_or_else(|| Error::Config("no captions file given (data.captions or data.dir)".into()))?;
        let vocab = self
            .data
            .vocab
            .clone()
            .or_else(|| from_dir("vocab.txt"))
            .ok_or_else(|| Error::Config("no vocabulary file given (data.vocab or data.dir)".into()))?;
        let contexts = self.data.contexts.clone().or_else(|| from_dir("contexts.mmcv"));
        let fused = self.model.fusion != FusionKind::None;
        let contexts = match contexts {
            Some(c) if fused || self.data.contexts.is_some() => Some(c),
            _ if fused => return Err(Error::Config("fused models need data.contexts".into())),
            _ => None,
        };
        let data = ResolvedData {
            captions,
            vocab,
            contexts,
            pretrained: self.data.pretrained.clone(),
        };
        for p in [Some(&data.captions), Some(&data.vocab), data.contexts.as_ref(), data.pretrained.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        let out = self
            .output
            .dir
            .clone()
            .ok_or_else(|| Error::Config("no output directory given (output.dir or --out)".into()))?;
        if out.exists() && !out.is_dir() {
            return Err(Error::Config(format!("output path {} is not a directory", out.display())));
        }
        Ok((data, out))
    }

    pub fn model_config(&self, vocab: usize, context_dim: Option<usize>) -> ModelConfig {
        let mut m = ModelConfig::new(self.model.arch, self.model.hidden, vocab, self.model.fusion);
        if let Some(d) = context_dim {
            m = m.with_context_dim(d);
        }
        m.fusion_bias = self.model.fusion_bias;
        m.decoder_bias = self.model.decoder_bias;
        m.unroll = self.train.unroll;
        if let Some(a) = self.model.lstm_activation {
            m.lstm_activation = a;
        }
        m
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides() {
        let text = "[model]\narch = \"gru\"\nhidden = 16\n[train]\nmax_epochs = 3\nseed = 9\n[data]\ndir = \"d\"\n";
        let mut c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.model.arch, CellKind::Gru);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.dir.as_deref(), Some(Path::new("/base/d")));
        c.apply(&Overrides {
            hidden: Some(8),
            seed: Some(1),
            ..Overrides::default()
        });
        assert_eq!((c.model.hidden, c.train.seed, c.train.max_epochs), (8, 1, 3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("[model]\nvocab = 3\n", Path::new(".")), Err(Error::Config(_))));
        assert!(RunConfig::parse("[bogus]\n", Path::new(".")).is_err());
    }
}
