// Text-only versus context-conditioned language models on a corpus drawn
// from two disjoint phrase grammars, where each sentence's context vector
// identifies its grammar. Prints a perplexity table over the held-out split.
//
// ```text
// cargo run --release --example multimodal_advantage
// ```

use mmlm::cells::CellKind;
use mmlm::data::{split_records, Split, Vocabulary};
use mmlm::eval::{evaluate, Condition, EvalReport};
use mmlm::lm::{FusionKind, Model, ModelConfig};
use mmlm::synthetic::two_grammar_corpus;
use mmlm::train::{fit, Dataset, TrainConfig};

pub fn run_example() -> mmlm::Result<EvalReport> {
    let corpus = two_grammar_corpus(0, 800, 16, 0.1, 0.2)?;
    let train = split_records(&corpus.records, Split::Train);
    let valid = split_records(&corpus.records, Split::Valid);
    let vocab = Vocabulary::build(train.iter().map(|r| r.tokens.as_slice()), 1)?;
    let config = TrainConfig {
        max_epochs: 8,
        ..TrainConfig::default()
    };

    let mut report = EvalReport::new(3);
    for fusion in [FusionKind::None, FusionKind::Outer] {
        let contexts = (fusion != FusionKind::None).then_some(&corpus.contexts);
        let data = |records| Dataset {
            records,
            vocab: &vocab,
            contexts,
        };
        let mut model = Model::<f32>::init(
            ModelConfig::new(CellKind::Lstm, 32, vocab.len(), fusion).with_context_dim(16),
            config.seed,
        )?;
        let best = fit(&mut model, data(&train), data(&valid), &config, None, None)?.best;
        let (name, conditions): (&str, &[Condition]) = match fusion {
            FusionKind::None => ("LSTM", &[Condition::LL]),
            _ => ("MM LSTM", &[Condition::LvLv, Condition::LvL]),
        };
        for &condition in conditions {
            let batches = data(&valid).batches(config.unroll, config.batch_size, None)?;
            report.push(name, condition, "synthetic", evaluate(&best, batches, condition)?);
        }
    }
    print!("{}", report.to_text());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
