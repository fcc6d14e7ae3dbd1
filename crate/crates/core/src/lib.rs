//! Simulator for hybrid federated/centralized learning (HFCL) over noisy,
//! bandwidth-constrained links.
//!
//! A parameter server trains a dense network together with `K` clients.
//! Active clients run local gradient steps and exchange model parameters over
//! noisy channels; inactive clients upload their datasets once and the server
//! trains on their behalf. Everything is seeded and bit-reproducible.

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod comms;
pub mod data;
pub mod error;
pub mod mat;
pub mod model;
pub mod rng;
pub mod schemes;

pub use error::{Error, Result};
