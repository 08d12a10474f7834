//! Small dense networks and the soft actor-critic learner built on them.

pub mod checkpoint;
pub mod mlp;
pub mod policy;
pub mod sac;

pub use checkpoint::{Checkpoint, RngState};
pub use mlp::{Adam, AdamConfig, Gradients, Mlp, MlpFile, ScalarAdam, Tape};
pub use policy::{sample_action, PolicyParams, SacHyper, SampleMode};
pub use sac::{sac_update, SacLosses, SacOptimizers};
