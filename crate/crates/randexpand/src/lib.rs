//! Simulation and certification of randomness expansion from untrusted
//! two-component nonsignalling devices.
//!
//! The library simulates sequential Bell experiments round by round with
//! exact density-matrix evolution, estimates the average Bell value from
//! observed transcripts, certifies a min-entropy lower bound on the device
//! output, extracts near-uniform bits with a Toeplitz two-universal hash,
//! and composes two unentangled devices into an alternating expansion
//! protocol with exact bit accounting.

pub mod bell;
pub mod cli;
pub mod device;
pub mod extractor;
pub mod protocol;
pub mod qmath;
pub mod rate;
pub mod sampler;
