//! Synthetic corpora, page preprocessing, tokenization and split protocol.

pub mod corpus;
pub mod image;
pub mod splits;
pub mod tokenize;

pub use corpus::{generate_corpus, load_corpus, save_corpus, ClassSizes, Corpus, CorpusSpec, Document, Signal};
pub use image::{augment, resize, shear, AugmentConfig};
pub use splits::{make_splits, SplitPlan, SplitProtocol};
pub use tokenize::{tokenize, EncodedText};
