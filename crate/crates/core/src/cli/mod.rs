//! The `mmlm` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, configuration or input errors, 3 runtime
//! aborts (diverged training, internal shape errors, failed writes).

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cells::CellKind;
use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::data::{
    init_embeddings_from_pretrained, load_captions, load_context_vectors, parse_captions, save_captions,
    split_records, CaptionRecord, ContextFormat, ContextStore, PretrainedEmbeddings, Split, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    beam_search, evaluate, nearest_neighbors, render_neighbors_csv, render_neighbors_text, render_samples,
    BeamConfig, Condition, EvalReport, Hypothesis,
};
use crate::lm::{FusionKind, Model};
use crate::train::{fit, Dataset, TrainState};
use config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Parser)]
#[command(name = "mmlm", version, about = "Multi-modal recurrent language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize raw captions, build the vocabulary and pack context vectors.
    Prepare(PrepareArgs),
    /// Train a model; writes last/best checkpoints and the learning curve.
    Train(TrainArgs),
    /// Perplexity report under one or more conditions.
    Eval(EvalArgs),
    /// Nearest words by cosine over the output embeddings.
    Neighbors(NeighborArgs),
    /// Beam-search captions for images or the null context.
    Sample(SampleArgs),
    /// Dump a checkpoint's manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw captions: `image_id TAB language TAB split TAB text` per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Image features, text (`id TAB v1 v2 ...`) or MMCV binary.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub min_count: u64,
    /// Captions are already tokenized; split on whitespace only.
    #[arg(long)]
    pub pretokenized: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
    /// Subword embeddings used to initialise the input embeddings.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Pass pretrained vectors through a fixed random projection.
    #[arg(long)]
    pub projection: bool,
    #[arg(long)]
    pub arch: Option<CellKind>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub fusion: Option<FusionKind>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub unroll: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Defaults to the file value, then $MMLM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoints in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Repeatable; a text-only baseline supplies L-L rows, a multi-modal
    /// model LV-LV and LV-L rows.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub language: Option<String>,
    /// Comma-separated subset of L-L, LV-LV, LV-L. Defaults to every
    /// condition the checkpoints support.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Report label per checkpoint, in the same order.
    #[arg(long = "name")]
    pub names: Vec<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also write eval.txt and eval.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NeighborArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub queries: Vec<String>,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    /// Image ids to caption (repeatable).
    #[arg(long = "image")]
    pub images: Vec<String>,
    /// Also sample with the null (all-zero) context.
    #[arg(long)]
    pub null_context: bool,
    #[arg(long, default_value_t = 13)]
    pub width: usize,
    /// Defaults to the model's unroll length.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::TrainAbort { .. } | Error::State(_) | Error::Dimension { .. } => EXIT_ABORT,
        Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => EXIT_ABORT,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out` and diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Prepare(a) => prepare(&a, out, err),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Neighbors(a) => neighbors(&a, out),
        Command::Sample(a) => sample(&a, out),
        Command::Inspect(a) => inspect(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Per split/language counts, vocabulary size and exclusions as
/// `category,key,value` rows.
fn summary_csv(kept: &[CaptionRecord], excluded: &[CaptionRecord], vocab: &Vocabulary, images: usize) -> String {
    let mut counts: BTreeMap<(Split, &str), usize> = BTreeMap::new();
    for r in kept {
        *counts.entry((r.split, r.language.as_str())).or_default() += 1;
    }
    let mut s = String::from("category,key,value\n");
    for ((split, lang), n) in &counts {
        s.push_str(&format!("records,{split}/{lang},{n}\n"));
    }
    s.push_str(&format!("records,total,{}\n", kept.len()));
    s.push_str(&format!("images,with_features,{images}\n"));
    s.push_str(&format!("vocab_size,,{}\n", vocab.len()));
    s.push_str(&format!("vocab_min_count,,{}\n", vocab.min_count()));
    let mut by_image: BTreeMap<&str, usize> = BTreeMap::new();
    for r in excluded {
        *by_image.entry(r.image_id.as_str()).or_default() += 1;
    }
    for (id, n) in &by_image {
        s.push_str(&format!("excluded_image,{id},{n}\n"));
    }
    s.push_str(&format!("warnings,,{}\n", excluded.len()));
    s
}

fn prepare(a: &PrepareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let file = std::fs::File::open(&a.captions).map_err(|e| Error::io(&a.captions, e))?;
    let records = parse_captions(
        std::io::BufReader::new(file),
        &a.captions.display().to_string(),
        !a.pretokenized,
    )?;
    let features = load_context_vectors(&a.features, None)?;
    let (kept, excluded): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| features.contains(&r.image_id));
    for r in &excluded {
        let _ = writeln!(err, "warning: image `{}` has no features; its caption is excluded", r.image_id);
    }
    let train = split_records(&kept, Split::Train);
    if train.is_empty() {
        return Err(Error::Data("no training captions left to build a vocabulary".into()));
    }
    let vocab = Vocabulary::build(train.iter().map(|r| r.tokens.as_slice()), a.min_count)?;
    let used: std::collections::HashSet<&str> = kept.iter().map(|r| r.image_id.as_str()).collect();
    let contexts = features.retain(|id| used.contains(id));

    create_dir(&a.out)?;
    save_captions(&kept, &a.out.join("captions.tsv"))?;
    vocab.save(&a.out.join("vocab.txt"))?;
    contexts.save(&a.out.join("contexts.mmcv"), ContextFormat::Binary)?;
    write_file(&a.out.join("summary.csv"), &summary_csv(&kept, &excluded, &vocab, contexts.len()))?;
    if !excluded.is_empty() {
        let _ = writeln!(err, "warning: {} caption(s) excluded for missing features", excluded.len());
    }
    emit(
        out,
        &format!(
            "prepared {} captions, {} images, vocabulary {} -> {}\n",
            kept.len(),
            contexts.len(),
            vocab.len(),
            a.out.display()
        ),
    )
}

fn train_overrides(a: &TrainArgs) -> Overrides {
    Overrides {
        data_dir: a.data.clone(),
        captions: a.captions.clone(),
        contexts: a.contexts.clone(),
        vocab: a.vocab.clone(),
        language: a.language.clone(),
        pretrained: a.pretrained.clone(),
        projection: a.projection,
        arch: a.arch,
        hidden: a.hidden,
        fusion: a.fusion,
        learning_rate: a.lr,
        clip: a.clip,
        batch_size: a.batch_size,
        unroll: a.unroll,
        epochs: a.epochs,
        seed: a.seed,
        out: a.out.clone(),
    }
}

fn filter_language(records: Vec<CaptionRecord>, language: Option<&str>) -> Vec<CaptionRecord> {
    match language {
        Some(l) => records.into_iter().filter(|r| r.language == l).collect(),
        None => records,
    }
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_env()?,
    };
    cfg.apply(&train_overrides(a));
    let (data, out_dir) = cfg.validate()?;

    let records = filter_language(load_captions(&data.captions)?, cfg.data.language.as_deref());
    let vocab = Vocabulary::load(&data.vocab)?;
    let contexts = data.contexts.as_deref().map(|p| load_context_vectors(p, None)).transpose()?;
    let fused = cfg.model.fusion != FusionKind::None;
    let model_cfg = cfg.model_config(vocab.len(), contexts.as_ref().filter(|_| fused).map(ContextStore::dim));
    let ckpt_cfg = CheckpointConfig {
        model: model_cfg.clone(),
        train: Some(cfg.train.clone()),
    };
    let train_records = split_records(&records, Split::Train);
    let valid_records = split_records(&records, Split::Valid);
    if train_records.is_empty() {
        return Err(Error::Config("no training captions for the selected language".into()));
    }
    let ctx = contexts.as_ref().filter(|_| fused);

    let mut model = Model::<f32>::init(model_cfg, cfg.train.seed)?;
    let resume = if a.resume {
        let last = Checkpoint::load(&out_dir.join(LAST_CHECKPOINT))?;
        let best = Checkpoint::load(&out_dir.join(BEST_CHECKPOINT))?;
        last.check_resumable(&ckpt_cfg)?;
        best.check_resumable(&ckpt_cfg)?;
        if last.vocab != vocab {
            return Err(Error::Config("checkpoint vocabulary differs from the data vocabulary".into()));
        }
        let state = last
            .state
            .ok_or_else(|| Error::Config("last checkpoint has no training state".into()))?;
        emit(out, &format!("resuming after epoch {} (lr {})\n", state.epoch, state.lr))?;
        model = last.model;
        Some((state, best.model))
    } else {
        if let Some(p) = &data.pretrained {
            let emb = PretrainedEmbeddings::load(p)?;
            let seed = cfg.data.projection.then_some(cfg.train.seed);
            let cov = init_embeddings_from_pretrained(model.cell.embedding_matrix_mut(), &vocab, &emb, seed)?;
            emit(
                out,
                &format!(
                    "pretrained init: {}/{} words from subwords (coverage {:.4}), {} from the unknown vector\n",
                    cov.segmented,
                    cov.words,
                    cov.coverage(),
                    cov.unknown
                ),
            )?;
        }
        None
    };

    create_dir(&out_dir)?;
    write_file(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let train_cfg = cfg.train.clone();
    let mut log = Vec::new();
    let mut hook = |state: &TrainState, model: &Model<f32>, improved: bool| -> Result<()> {
        let ck = Checkpoint::new(model.clone(), vocab.clone(), Some(train_cfg.clone()), Some(state.clone()));
        ck.save(&out_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&out_dir.join(BEST_CHECKPOINT))?;
        }
        write_file(&out_dir.join(CURVE_FILE), &state.curve_csv())?;
        let row = state.curve.last().expect("one row per epoch");
        log.push(format!(
            "epoch {:>3}  train-nll {:.4}  valid-nll {:.4}  valid-ppl {:.3}  lr {}{}\n",
            row.epoch,
            row.train_nll,
            row.valid_nll,
            row.valid_ppl,
            row.lr,
            if improved { "  *" } else { "" }
        ));
        Ok(())
    };
    let outcome = fit(
        &mut model,
        Dataset {
            records: &train_records,
            vocab: &vocab,
            contexts: ctx,
        },
        Dataset {
            records: &valid_records,
            vocab: &vocab,
            contexts: ctx,
        },
        &cfg.train,
        resume,
        Some(&mut hook),
    );
    for line in &log {
        emit(out, line)?;
    }
    let outcome = outcome?;
    if outcome.state.curve.is_empty() {
        write_file(&out_dir.join(CURVE_FILE), &outcome.state.curve_csv())?;
    }
    emit(
        out,
        &format!(
            "best valid PPL {:.3}; checkpoints in {}\n",
            outcome.state.best_valid_ppl,
            out_dir.display()
        ),
    )
}

fn model_label(model: &Model<f32>) -> String {
    let c = model.config();
    match c.fusion {
        FusionKind::None => c.arch.name().to_string(),
        f => format!("MM {} {}", c.arch.name(), if f == FusionKind::Inner { "inner" } else { "outer" }),
    }
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split: Split = a.split.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
    let requested: Vec<Condition> = a.conditions.iter().map(|c| c.parse()).collect::<Result<_>>()?;
    if !a.names.is_empty() && a.names.len() != a.checkpoints.len() {
        return Err(Error::Usage(format!(
            "{} --name values for {} checkpoints",
            a.names.len(),
            a.checkpoints.len()
        )));
    }
    let checkpoints = a.checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let applies = |c: Condition, ck: &Checkpoint| c.needs_fusion() == ck.model.is_fused();
    if let Some(bad) = requested.iter().find(|&&c| !checkpoints.iter().any(|ck| applies(c, ck))) {
        let need = if bad.needs_fusion() { "multi-modal" } else { "text-only" };
        return Err(Error::Usage(format!("condition {} needs a {need} checkpoint", bad.code())));
    }
    let records = filter_language(load_captions(&a.captions)?, a.language.as_deref());
    let records = split_records(&records, split);
    if records.is_empty() {
        return Err(Error::Data(format!("no {split} captions to evaluate")));
    }
    let language = match &a.language {
        Some(l) => l.clone(),
        None => {
            let first = &records[0].language;
            if records.iter().all(|r| &r.language == first) {
                first.clone()
            } else {
                "all".into()
            }
        }
    };
    let mut contexts: Option<ContextStore> = None;
    let mut report = EvalReport::new(3);
    for (i, ck) in checkpoints.iter().enumerate() {
        let model = &ck.model;
        let name = a.names.get(i).cloned().unwrap_or_else(|| model_label(model));
        for condition in Condition::ALL {
            let wanted = if requested.is_empty() { true } else { requested.contains(&condition) };
            if !wanted || !applies(condition, ck) {
                continue;
            }
            let ctx = if condition == Condition::LvLv {
                if contexts.is_none() {
                    let p = a.contexts.as_ref().ok_or_else(|| Error::Usage("LV-LV evaluation needs --contexts".into()))?;
                    contexts = Some(load_context_vectors(p, None)?);
                }
                contexts.as_ref()
            } else {
                None
            };
            let data = Dataset {
                records: &records,
                vocab: &ck.vocab,
                contexts: ctx,
            };
            let batches = data.batches(model.config().unroll, a.batch_size, None)?;
            report.push(&name, condition, &language, evaluate(model, batches, condition)?);
        }
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("eval.txt"), &report.to_text())?;
        write_file(&dir.join("eval.csv"), &report.to_csv())?;
    }
    emit(
        out,
        &match a.format {
            Format::Text => report.to_text(),
            Format::Csv => report.to_csv(),
        },
    )
}

fn neighbors(a: &NeighborArgs, out: &mut dyn Write) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Usage("k must be at least 1".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let reports = a
        .queries
        .iter()
        .map(|q| nearest_neighbors(&ck.model.decoder, q, &ck.vocab, a.k))
        .collect::<Result<Vec<_>>>()?;
    emit(
        out,
        &match a.format {
            Format::Text => render_neighbors_text(&reports),
            Format::Csv => render_neighbors_csv(&reports),
        },
    )
}

pub const NULL_CONTEXT_LABEL: &str = "null-context";

fn samples_csv(blocks: &[(String, Vec<Hypothesis>)], vocab: &Vocabulary) -> String {
    let mut s = String::from("label,rank,log_prob,caption\n");
    for (label, hyps) in blocks {
        for (i, h) in hyps.iter().enumerate() {
            s.push_str(&format!("{label},{},{},{}\n", i + 1, h.log_prob, vocab.decode(&h.tokens).join(" ")));
        }
    }
    s
}

fn sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = &ck.model;
    let cfg = BeamConfig {
        width: a.width,
        max_len: a.max_len.unwrap_or(model.config().unroll),
        length_normalize: false,
    };
    let mut blocks = Vec::new();
    if !model.is_fused() {
        if !a.images.is_empty() {
            return Err(Error::Usage("a text-only checkpoint cannot caption images".into()));
        }
        blocks.push(("text-only".to_string(), beam_search(model, None, &cfg)?));
    } else {
        if a.images.is_empty() && !a.null_context {
            return Err(Error::Usage("give --image ID and/or --null-context".into()));
        }
        if !a.images.is_empty() {
            let path = a
                .contexts
                .as_ref()
                .ok_or_else(|| Error::Usage("--image needs --contexts".into()))?;
            let store = load_context_vectors(path, None)?;
            for id in &a.images {
                let v = store
                    .get(id)
                    .map_err(|_| Error::Usage(format!("unknown image id `{id}`")))?;
                blocks.push((id.clone(), beam_search(model, Some(v), &cfg)?));
            }
        }
        if a.null_context {
            blocks.push((NULL_CONTEXT_LABEL.to_string(), beam_search(model, None, &cfg)?));
        }
    }
    emit(
        out,
        &match a.format {
            Format::Text => render_samples(&blocks, &ck.vocab),
            Format::Csv => samples_csv(&blocks, &ck.vocab),
        },
    )
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    emit(out, &Checkpoint::inspect(&a.checkpoint)?.render())
}
