//! Numerical bi-parameter dyadic analysis on finite lattices.
//!
//! Everything here lives on a bounded dyadic lattice: the domain per
//! parameter is `[-2^M, 2^M)^n` (optionally a torus of period `2^{M+1}`),
//! cells have side `2^-L`, and all integrals are exact finite sums. On top
//! of that base the crate builds random dyadic grids with goodness
//! classification, Haar systems and martingale calculus, Muckenhoupt
//! weights and strong maximal functions, BMO/CMO functionals, multilinear
//! dyadic model operators (shifts, partial and full paraproducts), a
//! representation engine that decomposes a discrete bilinear bi-parameter
//! operator into an exact average of model operators over random grids,
//! and Riesz-Kolmogorov compactness probes.
//!
//! The crate is `no_std`-compatible (with `alloc`); IO, file formats and
//! the command line driver live in the companion `biparam-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod compactprobe;
pub mod error;
pub mod fmath;
pub mod haar;
pub mod kernels;
pub mod lattice;
pub mod modelops;
pub mod oscillation;
pub mod representation;
pub mod rng;
pub mod step;
pub mod weights;

pub use error::{Error, Result};
pub use lattice::{DyadicCube, LatticeParams, ProductGrid, ShiftedGrid};
pub use step::StepFunction;

/// Exact rational used for grid probabilities and exponent arithmetic.
pub type Rational = num_rational::Ratio<u64>;
