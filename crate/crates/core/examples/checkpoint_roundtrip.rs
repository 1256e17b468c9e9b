// Saves a model with its vocabulary and training state, loads it back and
// checks that the NLL of a fixed batch is bit-identical.
//
// ```text
// cargo run --example checkpoint_roundtrip
// ```

use mmlm::cells::CellKind;
use mmlm::checkpoint::Checkpoint;
use mmlm::data::Vocabulary;
use mmlm::lm::{FusionKind, Model, ModelConfig};
use mmlm::synthetic::two_grammar_corpus;
use mmlm::train::{Dataset, TrainConfig, TrainState};

pub fn run_example() -> mmlm::Result<(f64, f64)> {
    let corpus = two_grammar_corpus(2, 40, 8, 0.1, 0.0)?;
    let vocab = Vocabulary::build(corpus.records.iter().map(|r| r.tokens.as_slice()), 1)?;
    let config = ModelConfig::new(CellKind::Gru, 16, vocab.len(), FusionKind::Outer).with_context_dim(8);
    let model = Model::<f32>::init(config, 3)?;
    let train = TrainConfig::default();

    let data = Dataset {
        records: &corpus.records,
        vocab: &vocab,
        contexts: Some(&corpus.contexts),
    };
    let batch = data.batches(train.unroll, 16, None)?.next().expect("one batch");
    let before = model.sequence_nll(&batch)?.loss;

    let dir = std::env::temp_dir().join(format!("mmlm-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| mmlm::Error::Config(e.to_string()))?;
    let path = dir.join("model.ckpt");
    let state = TrainState::new(&train);
    Checkpoint::new(model, vocab, Some(train), Some(state)).save(&path)?;

    let loaded = Checkpoint::load(&path)?;
    let after = loaded.model.sequence_nll(&batch)?.loss;
    print!("{}", Checkpoint::inspect(&path)?.render());
    println!("NLL before {before:?}, after {after:?}, identical: {}", before.to_bits() == after.to_bits());
    let _ = std::fs::remove_dir_all(&dir);
    Ok((before, after))
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
