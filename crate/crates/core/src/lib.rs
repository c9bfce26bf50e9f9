//! Unsupervised SAR image change detection built around a siamese
//! adaptive-fusion network.
//!
//! The crate is self-contained: a dense tensor engine with reverse-mode
//! differentiation ([`graph`]), raster handling and synthetic speckled-scene
//! generation ([`grid`], [`synth`], [`noise`]), fuzzy c-means pseudo-labeling
//! ([`fcm`], [`preclassify`]), the network itself ([`model`]), training
//! ([`train`], [`optim`]) and change-map evaluation ([`eval`]).

pub mod conv;
pub mod error;
pub mod eval;
pub mod fcm;
pub mod graph;
pub mod grid;
pub mod model;
pub mod noise;
pub mod optim;
pub mod preclassify;
pub mod synth;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
