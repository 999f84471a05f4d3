//! Plan-and-correct orchestration for compositional text-to-image
//! generation: prompt decomposition, layout planning, tool routing, guidance
//! artifacts, verification with local edits, and evaluation.

pub mod analysis;
pub mod engine;
pub mod eval;
pub mod error;
pub mod guidance;
pub mod layout;
pub mod policy;
pub mod tools;
pub mod vocab;

pub use error::{Error, Result};
