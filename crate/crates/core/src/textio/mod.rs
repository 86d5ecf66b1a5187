//! Tokenization, vocabulary and per-token input features.

mod features;
mod tokenize;
mod vectors;
mod vocab;

pub use features::{featurize_pair, Role, SentenceFeatures, FLAG_COUNT};
pub use tokenize::tokenize;
pub use vectors::PretrainedVectors;
pub use vocab::{TokenSequence, Vocabulary, DEFAULT_ADAPTABLE, DEFAULT_DIM, UNK, UNK_INDEX};
