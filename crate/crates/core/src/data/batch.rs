use rand::seq::SliceRandom;

use crate::data::context::ContextStore;
use crate::data::corpus::CaptionRecord;
use crate::data::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::lm::SequenceBatch;

/// Frames `ids` as `BOS ids EOS` and splits into `(inputs, targets)`,
/// keeping at most `unroll` prediction steps.
pub fn frame(ids: &[usize], unroll: usize) -> (Vec<usize>, Vec<usize>) {
    let mut framed = Vec::with_capacity(ids.len() + 2);
    framed.push(BOS);
    framed.extend_from_slice(ids);
    framed.push(EOS);
    framed.truncate(unroll + 1);
    let inputs = framed[..framed.len() - 1].to_vec();
    let targets = framed[1..].to_vec();
    (inputs, targets)
}

#[derive(Debug, Clone)]
struct Encoded {
    inputs: Vec<usize>,
    targets: Vec<usize>,
    context: Option<Vec<f32>>,
    image_id: String,
}

/// Deterministic stream of padded batches.
#[derive(Debug, Clone)]
pub struct BatchStream {
    items: Vec<Encoded>,
    order: Vec<usize>,
    batch_size: usize,
    with_contexts: bool,
    cursor: usize,
}

impl BatchStream {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn num_sequences(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk: Vec<&Encoded> = self.order[self.cursor..end].iter().map(|&i| &self.items[i]).collect();
        self.cursor = end;

        let steps = chunk.iter().map(|e| e.inputs.len()).max().unwrap_or(0);
        let mut batch = SequenceBatch {
            inputs: Vec::with_capacity(steps),
            targets: Vec::with_capacity(steps),
            mask: Vec::with_capacity(steps),
            contexts: self
                .with_contexts
                .then(|| chunk.iter().map(|e| e.context.clone()).collect()),
            image_ids: chunk.iter().map(|e| e.image_id.clone()).collect(),
        };
        for t in 0..steps {
            batch.inputs.push(chunk.iter().map(|e| *e.inputs.get(t).unwrap_or(&PAD)).collect());
            batch.targets.push(chunk.iter().map(|e| *e.targets.get(t).unwrap_or(&PAD)).collect());
            batch.mask.push(chunk.iter().map(|e| t < e.targets.len()).collect());
        }
        Some(batch)
    }
}

/// Encodes records into padded, masked batches of `batch_size`.
///
/// With `contexts` set, every record's image must have a vector. Without a
/// shuffle seed, records keep their input order.
pub fn encode_batch(
    records: &[CaptionRecord],
    vocab: &Vocabulary,
    contexts: Option<&ContextStore>,
    unroll: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchStream> {
    if batch_size == 0 || unroll == 0 {
        return Err(Error::Config("batch size and unroll length must be at least 1".into()));
    }
    let items = records
        .iter()
        .map(|r| {
            let (inputs, targets) = frame(&vocab.encode(&r.tokens), unroll);
            let context = match contexts {
                Some(store) => Some(store.get(&r.image_id)?.to_vec()),
                None => None,
            };
            Ok(Encoded {
                inputs,
                targets,
                context,
                image_id: r.image_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut crate::rng::stream(seed, "batches"));
    }
    Ok(BatchStream {
        items,
        order,
        batch_size,
        with_contexts: contexts.is_some(),
        cursor: 0,
    })
}
