// Nearest neighbours by cosine similarity over the output embeddings (rows
// of the decoder matrix) of a model trained on the two-grammar corpus.
// Words of the same grammar and class end up close together.
//
// ```text
// cargo run --release --example embedding_neighbors
// ```

use mmlm::cells::CellKind;
use mmlm::data::{split_records, Split, Vocabulary};
use mmlm::eval::{nearest_neighbors, render_neighbors_text, NeighborReport};
use mmlm::lm::{FusionKind, Model, ModelConfig};
use mmlm::synthetic::two_grammar_corpus;
use mmlm::train::{fit, Dataset, TrainConfig};

pub fn run_example() -> mmlm::Result<Vec<NeighborReport>> {
    let corpus = two_grammar_corpus(1, 600, 16, 0.1, 0.2)?;
    let train = split_records(&corpus.records, Split::Train);
    let valid = split_records(&corpus.records, Split::Valid);
    let vocab = Vocabulary::build(train.iter().map(|r| r.tokens.as_slice()), 1)?;
    let config = TrainConfig {
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let data = |records| Dataset {
        records,
        vocab: &vocab,
        contexts: None,
    };
    let mut model = Model::<f32>::init(ModelConfig::new(CellKind::DeltaRnn, 32, vocab.len(), FusionKind::None), 1)?;
    let best = fit(&mut model, data(&train), data(&valid), &config, None, None)?.best;

    let reports = ["anoun0", "bverb2"]
        .iter()
        .map(|q| nearest_neighbors(&best.decoder, q, &vocab, 10))
        .collect::<mmlm::Result<Vec<_>>>()?;
    print!("{}", render_neighbors_text(&reports));
    Ok(reports)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
