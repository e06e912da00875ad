//! Temporally abstracted planning and learning for cooperative Dec-POMDPs.
//!
//! The crate is `no_std` (it needs `alloc`) and carries every algorithmic
//! piece: the finite model and its options, the common-information belief
//! filter, the option-level dynamic program, the distributed option-critic
//! learner and the grid-world environments used to exercise it. File formats,
//! experiment orchestration and the command line live in the `teamopt` crate.
//!
//! Module map:
//!
//! * [`space`]: mixed-radix indexing of joint states, actions and observations.
//! * [`model`]: [`DecPomdpModel`] with validation, joint reward and sampling.
//! * [`option`]: parameterized Markov options, option pools and joint options.
//! * [`belief`]: exact and factored common-belief filters.
//! * [`planner`]: option models, Bellman backups, belief-space value iteration.
//! * [`learner`]: centralized option evaluation, distributed option improvement
//!   and the episode/training loops, plus tabular actor-critic baselines.
//! * [`teamgrid`]: FourRooms / Switch / DualSwitch grid worlds.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod belief;
pub mod generate;
pub mod learner;
pub mod math;
pub mod model;
pub mod option;
pub mod planner;
pub mod sample;
pub mod space;
pub mod teamgrid;

pub use belief::{CommonBelief, CommonObservation, FactoredBelief};
pub use model::{DecPomdpModel, ModelError, Violation};
pub use option::{JointOption, MarkovOption, OptionPool};
pub use space::{ProductSpace, StateSpace};
