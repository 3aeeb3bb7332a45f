//! Block-wise intermediate-representation distillation on small residual
//! networks.
//!
//! The crate contains a reverse-mode tensor engine ([`tensor`]), declarative
//! block-structured networks ([`netgraph`]), the distillation losses
//! ([`losses`]), training procedures and pruning ([`trainer`]) and
//! deterministic datasets ([`data`]).

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub mod container;
pub mod data;
pub mod losses;
pub mod netgraph;
pub mod trainer;
