//! Grasp stabilization for a simulated tendon-driven, under-actuated hand.
//!
//! The pipeline has three stages:
//!
//! 1. [`search`] wiggles the four finger muscles around a feedforward grasp
//!    posture and records the contact sensors (random walk with either a
//!    slowly modulated or a constant step amplitude).
//! 2. [`model`] trains a fully connected network that maps the current
//!    contact state, control state, and a ten-step control-input sequence to
//!    the next ten contact states.
//! 3. [`stabilizer`] runs a per-tick optimizer over that network: seed a
//!    candidate batch, then refine with normalized-gradient steps and a
//!    step-size line search, holding the already-sent input fixed.
//!
//! [`sim`] provides the deterministic plant the pipeline runs against and
//! [`eval`] the metrics, experiment matrix, and CSV export used to compare
//! stabilized and unstabilized runs.

pub mod eval;
pub mod model;
pub mod search;
pub mod sim;
pub mod stabilizer;
pub mod types;
