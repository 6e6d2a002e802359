//! Channel estimation for MIMO links whose transmitter and receiver are both
//! flexible intelligent metasurfaces (FIMs).
//!
//! The crate synthesizes geometric multipath channels between two morphing
//! surfaces, simulates a two-phase pilot protocol (receiver morphs first,
//! then transmitter), and recovers the steering matrices and path gains with
//! a coupled PARAFAC alternating least squares solver.
//!
//! Module map:
//!
//! * [`geometry`]: surface frames, element layout and morph patterns.
//! * [`channel`]: steering vectors and the multipath channel matrix.
//! * [`tensor`]: third-order tensors, unfoldings, Khatri-Rao and LS solves.
//! * [`training`]: pilot protocol and observation tensors.
//! * [`estimator`]: two-phase ALS, gain fit, alignment and NMSE.
//! * [`harness`]: Monte-Carlo sweeps and CSV output.

pub mod channel;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense complex column vector.
pub type CVector = nalgebra::DVector<C64>;
/// Real 3-vector, lengths in carrier wavelengths.
pub type Vec3 = nalgebra::Vector3<f64>;
