//! Relay power allocation for M-1-1 decode-and-forward full-duplex
//! networks with statistical channel knowledge.
//!
//! The relay splits a total budget `P_r` across `M` orthogonal source
//! subchannels. Only path losses and Rayleigh statistics are known, so every
//! rate is an ergodic rate expressed through `exp(x)·E1(x)`.

pub mod allocators;
pub mod error;
pub mod model;
pub mod ops;
pub mod quartic;
pub mod rates;
pub mod sim;
pub mod specfun;

pub use error::{Error, Result};
