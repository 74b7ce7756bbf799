//! Non-intrusive speech quality prediction with a compact CNN, trained with
//! surrogate gradients so its convolutional activations can be binarized,
//! plus int8 post-training quantization and a bit-packed mixed-precision
//! inference engine where binary-activation convolutions become masked
//! integer accumulations and pooling becomes bitwise OR / popcount.

pub mod audio;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Result, SqpError};

#[cfg(feature = "parallel")]
pub use rayon;
