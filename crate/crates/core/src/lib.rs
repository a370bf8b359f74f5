//! Periodic orbits of the Hill restricted four-body problem (HR4BP).
//!
//! Orbits are seeded from CR3BP periodic orbits selected by a Melnikov-type
//! persistence function, continued in `m` by pseudo-arclength, and scanned
//! for bifurcations through the SVD of the corrections Jacobian.

pub mod archive;
pub mod bifurcation;
pub mod continuation;
mod dop853;
pub mod dynamics;
pub mod error;
pub mod hvo;
mod linalg;
pub mod melnikov;
pub mod pipeline;
pub mod propagation;
pub mod seeds;

pub use dynamics::{State, SystemParams, MU_EM, M_MAX, M_SEM};
pub use error::{Error, Result};
