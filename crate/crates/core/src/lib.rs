//! Sign spotting with multiple-instance contrastive embeddings.

pub mod bags;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mil_nce;
pub mod model;
pub mod spotter;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
