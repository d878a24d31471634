//! Optimal-transport sentence distances over contextualized token embeddings.

pub mod alignment;
pub mod contrastive;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod matrix;
pub mod similarity;
pub mod toy;
pub mod transport;

pub use error::{Error, Result};
