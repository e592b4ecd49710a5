//! The host masked-LM encoder that adapters plug into.

mod model;
mod pretrain;
mod vocab;

pub use model::{count_layer_weights, EncoderConfig, EncoderModel};
pub use pretrain::{evaluate_mlm, pretrain_toy, PretrainConfig, PretrainReport};
pub use vocab::{SpecialIds, TokenSequence, Vocabulary, CLS, MASK, PAD, SEP, UNK};
