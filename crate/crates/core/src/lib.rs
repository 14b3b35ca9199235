//! Predictive multi-agent coverage control.
//!
//! Agents with discrete-time LTI dynamics are steered so that the empirical
//! distribution of their trajectories approaches a weighted reference point
//! cloud. Each simulation step runs three stages per agent:
//!
//! * **A**: pick local sample-points by weight-normalized distance and apply
//!   the input minimizing the predicted local 2-Wasserstein distance
//!   ([`controller`]),
//! * **B**: transport the visited mass from the reference to the new
//!   agent-point ([`transport::weight_update`]),
//! * **C**: agents in communication range share weights by elementwise
//!   minimum ([`coordination`]).
//!
//! [`engine::run`] orchestrates the loop; the [`cli`] module exposes it as the
//! `dpc` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controller;
pub mod coordination;
pub mod distribution;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod numerics;
pub mod output;
pub mod plot;
pub mod scenario;
pub mod transport;

pub use error::{Error, Result};

/// Planar position in meters.
pub type Point = nalgebra::Vector2<f64>;
