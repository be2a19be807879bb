//! Learning response-selection matching models from weak supervision.

pub mod annotator;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod index;
pub mod matchers;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
