//! Dynamic early-exit policy stack for sequential decision-making.
//!
//! The crate bundles everything needed to train and run a budgeted
//! early-exit policy on a synthetic language-conditioned tabletop
//! benchmark:
//!
//! - [`tensor`]: minimal reverse-mode autodiff (f64) with an LSTM cell and
//!   AdamW.
//! - [`env`]: the simulator, scripted expert, dataset generator, and
//!   task-chain evaluator.
//! - [`net`]: the multi-exit backbone with recurrent action heads, both as
//!   a differentiable graph (training) and as a fast incremental inference
//!   path (f32/f64).
//! - [`train`]: exit-sampling imitation learning with auxiliary losses and
//!   a two-phase schedule.
//! - [`policy`]: adaptive per-timestep inference under a termination
//!   criterion, with exact compute accounting.
//! - [`budget`]: the cost model, offline threshold calibration under a
//!   FLOPs budget, and the online sequential model-based solver.

pub mod budget;
pub mod env;
pub mod gradcheck;
pub mod net;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;
