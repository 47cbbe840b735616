//! Solvers for chemical master equations.
//!
//! Three routes to the time-dependent state distribution of a stochastic
//! reaction network are provided side by side:
//!
//! * [`statespace`]: the exact generator on a truncated box, propagated by
//!   uniformization;
//! * [`ssa`]: Gillespie direct-method trajectory ensembles;
//! * [`reward`] and [`met`]: autoregressive neural models. Recurrent reward
//!   models are trained step by step in time, and a prompt-conditioned
//!   transformer is trained against them by policy gradients so that it maps
//!   `(rates, initial state, time)` straight to a joint distribution.
//!
//! [`tasks`] builds parameter sweeps, rate inference and trajectory sampling
//! on top of a trained transformer, and [`analysis`] holds the distribution
//! metrics used to compare the routes.

pub mod analysis;
mod autoreg;
pub mod diff;
pub mod met;
pub mod model;
pub mod reward;
pub mod rng;
pub mod ssa;
pub mod statespace;
pub mod tasks;

mod error;

pub use error::Error;
