//! Image and text preprocessing, and batch assembly.

mod batch;
mod image;
mod tokenizer;

pub use batch::{collate, prepare_example, Batch, Example, IGNORE_INDEX};
pub use image::{preprocess_image, ImageTensor, Normalization, SIDE_MULTIPLE};
pub use tokenizer::{pretokenize, SpecialIds, TokenSequence, Tokenizer, BOS, EOS, PAD, VOCAB_MAGIC, VOCAB_VERSION};
