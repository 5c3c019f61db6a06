//! Coded communication for cross-silo federated learning.
//!
//! The crate bundles:
//!
//! - [`coding`] — linear encoding/decoding of model partitions over real
//!   vectors, with random and Cauchy-matrix coefficient generation.
//! - [`wire`] — the bit-exact frame format shared by the simulator's byte
//!   accounting and any future socket transport.
//! - [`protocol`] — per-node state machines for the nine communication
//!   protocol variants (baseline, hierarchical, coded download/upload,
//!   coded aggregation).
//! - [`redundancy`] — the adaptive redundancy controller that tunes the
//!   coding redundancy from round-duration feedback.
//! - [`sim`] — a deterministic discrete-event network simulator with
//!   fluctuating heterogeneous links, NIC caps and fault injection.
//! - [`config`] / [`report`] — experiment configuration, metrics output
//!   and comparison, backing the `fedcod` binary.

pub mod coding;
pub mod config;
pub mod protocol;
pub mod redundancy;
pub mod report;
pub mod rng;
pub mod sim;
pub mod wire;
