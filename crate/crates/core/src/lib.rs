//! Coded deep learning: trainable probabilistic quantization of weights and
//! activations, entropy-constrained training, and Huffman coding of the
//! resulting symbol streams.

pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod entropy;
pub mod net;
pub mod parsim;
pub mod quant;
pub mod train;
mod util;
mod wire;

pub use error::{Error, Result};
