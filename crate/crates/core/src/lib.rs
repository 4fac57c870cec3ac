//! Feature-importance (FI) supervision for classifiers over object-feature
//! inputs.
//!
//! The crate covers the whole loop: a synthetic object/question task with
//! ground-truth importance annotations ([`synthdata`]), masking functions
//! ([`replace`]), an attention classifier ([`model`]), explanation methods
//! ([`explain`]), training objectives ([`objectives`]), the training loop
//! ([`train`]), right-for-the-right-reasons and faithfulness metrics
//! ([`metrics`]) and the statistics used to compare trained models
//! ([`analysis`]).

pub mod analysis;
pub mod batch;
pub mod error;
pub mod explain;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod replace;
pub mod seeding;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use fisup_autodiff as autodiff;
