// Beam-search captions (width 13) from a context-conditioned model: one
// image from each grammar's cluster, then the null context.
//
// ```text
// cargo run --release --example beam_sampling
// ```

use mmlm::cells::CellKind;
use mmlm::data::{split_records, Split, Vocabulary};
use mmlm::eval::{beam_search, render_samples, BeamConfig, Hypothesis};
use mmlm::lm::{FusionKind, Model, ModelConfig};
use mmlm::synthetic::two_grammar_corpus;
use mmlm::train::{fit, Dataset, TrainConfig};

pub fn run_example() -> mmlm::Result<Vec<(String, Vec<Hypothesis>)>> {
    let corpus = two_grammar_corpus(4, 600, 16, 0.1, 0.2)?;
    let train = split_records(&corpus.records, Split::Train);
    let valid = split_records(&corpus.records, Split::Valid);
    let vocab = Vocabulary::build(train.iter().map(|r| r.tokens.as_slice()), 1)?;
    let config = TrainConfig {
        max_epochs: 12,
        ..TrainConfig::default()
    };
    let data = |records| Dataset {
        records,
        vocab: &vocab,
        contexts: Some(&corpus.contexts),
    };
    let model_config = ModelConfig::new(CellKind::Lstm, 32, vocab.len(), FusionKind::Outer).with_context_dim(16);
    let mut model = Model::<f32>::init(model_config, 4)?;
    let best = fit(&mut model, data(&train), data(&valid), &config, None, None)?.best;

    let beam = BeamConfig {
        max_len: 12,
        ..BeamConfig::default()
    };
    let mut blocks = Vec::new();
    // Validation images alternate between the two grammars.
    for record in valid.iter().take(2) {
        let context = corpus.contexts.get(&record.image_id)?;
        let mut hyps = beam_search(&best, Some(context), &beam)?;
        hyps.truncate(3);
        blocks.push((record.image_id.clone(), hyps));
    }
    let mut hyps = beam_search(&best, None, &beam)?;
    hyps.truncate(3);
    blocks.push(("null-context".to_string(), hyps));
    print!("{}", render_samples(&blocks, &vocab));
    Ok(blocks)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
