//! Simulation-staged training of a goal-reaching policy for a planar mobile
//! base: identify a velocity model from logged commands, train a soft
//! actor-critic agent against it, gate progress through a staged pipeline and
//! follow paths with the result.

pub mod curriculum;
pub mod dynamics;
pub mod error;
pub mod nn;
pub mod pathfollow;
pub mod pipeline;
pub mod replay;
pub mod sysid;
pub mod train;

pub use error::{Error, Result};
