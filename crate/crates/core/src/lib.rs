//! Core library of the speech translation workbench.
//!
//! Synthetic three-way parallel corpora, acoustic front end, character and
//! subword vocabularies, Kneser-Ney language models, a small differentiable
//! encoder-decoder stack with CTC and attention heads, the joint multi-task
//! training loop, decoding, and scoring.

pub mod autograd;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod io;
pub mod lm;
pub mod nnet;
pub mod params;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use params::{Gradients, ParamSet};
pub use tensor::Matrix;
