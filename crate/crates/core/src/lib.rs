//! Group-wise preference learning for reactive motion-token generation, a
//! multimodal contrastive judge and tier-aware ranking evaluation, all at
//! desk scale on planted synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod judge;
pub mod numeric;
pub mod optim;
pub mod preference;
pub mod rng;
pub mod seq_model;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
