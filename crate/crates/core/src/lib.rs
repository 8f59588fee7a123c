//! Semi-supervised domain generalization with similarity-averaged class
//! representations, a learnable feature modulator, and uncertainty-gated
//! pseudo-labels.

pub mod data;
pub mod error;
pub mod metrics;
pub mod modulator;
pub mod network;
pub mod numerics;
pub mod objective;
pub mod pseudolabel;
pub mod rng;
pub mod sarproto;
pub mod trainer;

pub use error::{Error, Result};
