//! Event-triggered asynchronous distributed randomized block Kaczmarz.
//!
//! The crate simulates `N` agents, each owning a contiguous row block of a
//! linear system `Ax = b`, that repeatedly average their neighbors' latest
//! estimates and project onto a randomly chosen sub-block of their own rows.
//! Inconsistent systems are handled through the augmented system
//! `(A  lambda I)(x; y) = b`.

pub mod agent;
pub mod analysis;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mtx;
pub mod problem;
pub mod rng;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};
