//! Stable autonomous flow matching.
//!
//! Flow-matching generative models whose learned vector field is the
//! negative gradient of a scalar potential over an augmented state
//! `(z, τ)`. The pseudo-time `τ` replaces wall-clock time, so the field is
//! autonomous and the potential doubles as a Lyapunov function. The
//! straight-line (OT) flow-matching baseline ships alongside for
//! comparison, and an exact Gaussian-mixture oracle for the marginal field
//! over empirical targets is used for verification.

pub mod ccnf;
pub mod data;
pub mod diffkit;
pub mod dynamics;
pub mod error;
pub mod loss;
pub mod model;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
