//! Contrastive ranking of knowledge-graph paths for conversational question
//! answering, trained jointly with a response decoder and a domain pointer.

pub mod app;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod inference;
pub mod kg;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
