//! Deformable image registration with a spatially-variant, label-driven
//! regularization weight that conditions the network at inference time.

pub mod csain;
pub mod error;
pub mod eval;
pub mod grid;
pub mod hyperopt;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod synth;
pub mod weighting;

pub use error::{Error, Result};
