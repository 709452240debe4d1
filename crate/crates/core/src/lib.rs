//! Over-the-air federated learning with age-aware sparsification.
//!
//! Clients train a multinomial logistic regression on MNIST, sparsify their
//! updates with AgeTop-k or rTop-k, and transmit them over a Rayleigh-faded
//! multi-antenna OFDM uplink. The server combines the antennas with MRC.

pub mod bound;
pub mod channel;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use exec::Execution;
