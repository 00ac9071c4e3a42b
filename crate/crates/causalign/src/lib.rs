//! Causal preference modeling for personalized next-token generation.
//!
//! The crate trains a small decoder-only language model on (user history,
//! query, target) triples and measures, per target token, how much the user's
//! history causally shifts the model's prediction. Those per-token effect
//! scores classify tokens into preference-bearing and generic, drive a
//! weighted cross-entropy objective, and feed an auxiliary loss on the
//! logit difference between a with-history and a history-ablated forward
//! pass. Attribution reports, text-overlap metrics, and a CLI pipeline
//! round out the toolkit.

pub mod causal;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod loss;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod scalar;
pub(crate) mod util;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
