// Trains an LSTM language model until it has memorized 50 random sentences.
//
// ```text
// cargo run --release --example memorize_toy
// ```

use mmlm::cells::CellKind;
use mmlm::data::Vocabulary;
use mmlm::eval::{evaluate, Condition};
use mmlm::lm::{FusionKind, Model, ModelConfig};
use mmlm::synthetic::memorization_corpus;
use mmlm::train::{train_epoch, Dataset, TrainConfig};

/// Returns the epoch at which training perplexity first fell below 1.5.
pub fn run_example() -> mmlm::Result<Option<usize>> {
    let records = memorization_corpus(0, 50, 55, 12, 16);
    let vocab = Vocabulary::build(records.iter().map(|r| r.tokens.as_slice()), 1)?;
    let mut model = Model::<f32>::init(ModelConfig::new(CellKind::Lstm, 32, vocab.len(), FusionKind::None), 0)?;
    let config = TrainConfig::default();
    let data = Dataset {
        records: &records,
        vocab: &vocab,
        contexts: None,
    };

    for epoch in 1..=200 {
        let batches = data.batches(config.unroll, config.batch_size, Some(config.epoch_seed(epoch)))?;
        train_epoch(&mut model, batches, &config, config.learning_rate, epoch)?;
        let ppl = evaluate(&model, data.batches(config.unroll, config.batch_size, None)?, Condition::LL)?.ppl;
        if epoch % 25 == 0 || ppl < 1.5 {
            println!("epoch {epoch:>3}  training PPL {ppl:.3}");
        }
        if ppl < 1.5 {
            return Ok(Some(epoch));
        }
    }
    Ok(None)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    match run_example()? {
        Some(e) => println!("memorized after {e} epochs"),
        None => println!("not memorized within 200 epochs"),
    }
    Ok(())
}
