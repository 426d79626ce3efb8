//! Character-level neural graph-based dependency parser.
//!
//! The pipeline reads words as character sequences (convolutional reader with
//! highway layers), contextualizes them with additive bidirectional GRU layers
//! (tagger), and points every word at its head with an attention scorer whose
//! normalized scores double as a head-location distribution (parser head).
//! Labels come from a small maxout network in soft- or hard-attention mode.
//! Trees are decoded greedily with a Chu-Liu-Edmonds fallback and scored with
//! LA/UAS/LAS.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; `f32` is
//! the training precision and `f64` is used for gradient checking. Concrete
//! aliases live at the crate root.

pub mod conllu;
pub mod decoder;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod parser_head;
pub mod reader;
pub mod tagger;
pub mod tensor;
pub mod training;

mod scalar;
pub use scalar::Scalar;

#[cfg(test)]
pub(crate) mod testutil;

pub use conllu::{Sentence, Token};
pub use decoder::{DecodeMode, ParseResult};
pub use lexicon::Lexicon;
pub use metrics::EvalReport;
pub use model::{Model, ModelConfig};
pub use tensor::{Tape, Tensor, Var};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Checking-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Checking-precision tape.
pub type Tape64 = Tape<f64>;
/// Training-precision model.
pub type Model32 = Model<f32>;
/// Checking-precision model.
pub type Model64 = Model<f64>;
