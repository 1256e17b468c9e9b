//! Corpus ingestion, vocabulary, batching, context vectors and pretrained
//! subword embeddings.

pub mod batch;
pub mod context;
pub mod corpus;
pub mod pretrained;
pub mod vocab;

pub use batch::{encode_batch, frame, BatchStream};
pub use context::{load_context_vectors, ContextFormat, ContextStore};
pub use corpus::{load_captions, parse_captions, save_captions, split_records, tokenize, CaptionRecord, Split};
pub use pretrained::{init_embeddings_from_pretrained, Composition, InitCoverage, PretrainedEmbeddings};
pub use vocab::{Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, UNK};
