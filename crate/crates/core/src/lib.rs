//! Learning-credit assignment for trained feed-forward networks via block-wise
//! Koopman operators.
//!
//! A network is cut into blocks ([`model`]); each block is made
//! dimension-preserving by a random linear alignment ([`alignment`]),
//! iterated from network-produced states and linearized by DMD
//! ([`koopman`]); the resulting operators are scored ([`credit`]).
//! [`cli`] drives complete analyses from a JSON config.

pub mod alignment;
pub mod cli;
pub mod credit;
pub mod koopman;
pub mod linalg;
pub mod model;
