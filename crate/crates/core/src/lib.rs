//! Segmental (semi-Markov) and CTC sequence models over weighted finite-state
//! search spaces: exact max-path and forward-backward inference, hinge, log
//! and marginal log losses, FC and SRNN segment weight functions, a
//! bidirectional LSTM encoder with manual backpropagation, and the training
//! loop that ties them together.
//!
//! The crate is `no_std` with `alloc` when the default `std` feature is off.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dp;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod lattice;
pub mod losses;
pub mod math;
pub mod model;
pub mod params;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
