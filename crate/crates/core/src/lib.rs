//! Semantic/domain decoupling of paired visual and neural embeddings, with
//! prototype-guided alignment and zero-shot decoding of unseen classes.
//!
//! The pipeline: [`feature_io`] loads or synthesizes paired features,
//! [`training`] fits the encoders with [`mi`] estimators and [`prototypes`],
//! and [`evaluation`] decodes unseen classes against visual templates.

pub mod blob;
pub mod checkpoint;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod feature_io;
pub mod gradcheck;
pub mod mi;
pub mod optim;
pub mod prototypes;
pub mod training;

pub use error::{Error, Result};
