//! Simulation and control of chains of bi-stable elements joined in series
//! through viscous dampers.
//!
//! The chain is pulled at one end with a prescribed rate. Depending on that
//! rate a different element snaps first, which lets a single scalar input
//! steer the chain through its multistable states.
//!
//! Units: forces in N, lengths in mm, time in s, damping in N·s/mm.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critical_rate;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod io;
pub mod planner;
pub mod profiles;
pub mod roots;

pub use error::{Error, Result};
pub use profiles::{CriticalPoints, ForceProfile, Phase};
