//! Query-conditioned adaptive frame selection for video question answering.
//!
//! A small cross-modal Transformer scores every pre-sampled candidate frame
//! against a text prompt (rank head) and predicts how many frames to keep
//! (K head). The crate also contains the staged training curriculum, the
//! agent-driven keyframe mining pipeline that produces supervision, and a
//! synthetic planted-evidence world that stands in for every external model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod answers;
pub mod autodiff;
pub mod backends;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod parallel;
pub mod pipeline;
pub mod selector;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use parallel::Exec;
