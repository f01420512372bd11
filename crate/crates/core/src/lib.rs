//! Least-significant-bit steganography on float32 model weights, and the
//! steganalysis tooling to detect it.
//!
//! The crate is organised bottom-up:
//!
//! - [`bitview`]: bit-exact float32 word views (sign / exponent / mantissa, XLSB and XMSB regions).
//! - [`tensorstore`]: model records, the flattened weight vector, and the `MZW1` file format.
//! - [`netcore`]: a small dense network engine (forward, backprop, SGD).
//! - [`stegattack`]: the X-LSB attack, its fill variant, and payload extraction.
//! - [`zooforge`]: deterministic benign model zoos and their attacked images.
//! - [`featurex`]: reconstruction-loss, gradient and raw-weight features.
//! - [`detectkit`]: the MEAN+ε threshold rule, tree ensembles, metrics and the experiment protocol.

pub mod bitview;
pub mod detectkit;
mod error;
pub mod featurex;
pub mod netcore;
pub mod rng;
pub mod stegattack;
pub mod tensorstore;
pub mod zooforge;

pub use error::{Error, Result};
