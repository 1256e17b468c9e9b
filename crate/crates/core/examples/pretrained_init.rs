// Initialises input embeddings from subword vectors: whole words copy their
// vector, others average their greedy longest-match pieces, and words that
// cannot be segmented fall back to the `[UNK]` vector.
//
// ```text
// cargo run --example pretrained_init
// ```

use mmlm::cells::CellKind;
use mmlm::data::{init_embeddings_from_pretrained, InitCoverage, PretrainedEmbeddings, Vocabulary};
use mmlm::lm::{FusionKind, Model, ModelConfig};

const SUBWORDS: &str = "\
2
play 1 2
##ing 3 -4
##s 0.5 0.5
cat 7 7
[UNK] -1 -1
";

pub fn run_example() -> mmlm::Result<InitCoverage> {
    let emb = PretrainedEmbeddings::parse(SUBWORDS.as_bytes(), "subwords")?;
    let sentences = [vec!["playing", "cats", "cat"], vec!["zzz", "plays"]];
    let vocab = Vocabulary::build(sentences.iter().map(Vec::as_slice), 1)?;

    // Hidden size equals the pretrained dimension, so no projection is needed.
    let mut model = Model::<f32>::init(ModelConfig::new(CellKind::DeltaRnn, 2, vocab.len(), FusionKind::None), 1)?;
    let w = model.cell.embedding_matrix_mut();
    let coverage = init_embeddings_from_pretrained(w, &vocab, &emb, None)?;
    for (id, word) in vocab.words() {
        let (_, how) = emb.compose_word_embedding(word)?;
        println!("{word:<8} -> [{:>5.2}, {:>5.2}]  {how:?}", w.get(0, id), w.get(1, id));
    }
    println!(
        "coverage {}/{} = {:.2} ({} from [UNK])",
        coverage.segmented,
        coverage.words,
        coverage.coverage(),
        coverage.unknown
    );
    Ok(coverage)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
