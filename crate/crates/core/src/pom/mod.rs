//! The Polynomial Mixer.
//!
//! Tokens are projected to `k` chunks of width `D`, passed through an
//! activation and multiplied cumulatively, so chunk `m` holds a degree-`m`
//! polynomial of the token. The expanded tokens are averaged into a state
//! (one per sequence, or one per query row under a mask), and each query
//! token reads that state back through a sigmoid gate and an output
//! projection. Cost is linear in sequence length.

mod distinct;
mod kernel;
mod mask;
pub(crate) mod mix;
mod params;
mod stream;

pub use distinct::{contextual_distinctness_check, distinctness_trials, DistinctnessReport};
pub use kernel::{
    pom_forward, pom_forward_on, pom_forward_path_on, polynomial_expand, polynomial_expand_on,
    polynomial_expand_path, select, select_on, ExpandPath,
};
pub use mask::MaskSpec;
pub use mix::{mix, MixOutput, MASK_EPS};
pub use params::{PoMParams, PoMVars};
pub use stream::PoMState;
