//! Simulation-based selection of a feasible optimal policy from a finite
//! policy set in a constrained Markov decision process.
//!
//! * [`model`]: the finite CMDP, policies and seeded rollouts.
//! * [`oracle`]: exact evaluation by linear algebra, used as ground truth.
//! * [`selector`]: the FTAL and AUER selection loops.
//! * [`bounds`]: truncation constants, probability and regret bounds, metrics.
//! * [`harness`]: instance generation and replicated experiments.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod selector;

pub use error::{Error, Result};
pub use model::{CmdpModel, DisturbanceSegment, Policy, PolicySet, RolloutSample};
pub use selector::{run, Algorithm, RunConfig, RunTrace};
