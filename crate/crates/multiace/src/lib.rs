//! Configurable E(3)-equivariant atom-centered interatomic potentials.
//!
//! The crate implements a family of potentials built from the same parts —
//! a one-particle basis of learnable radials and spherical harmonics, a
//! permutation-invariant density projection, tensor-product correlation, and
//! Clebsch-Gordan symmetrization — assembled into single-layer linear models
//! or multi-layer equivariant message passing networks. The design space
//! (correlation order, equivariance order, coupling scheme, radial variant,
//! self-connections, nonlinearities, normalization) is exposed through
//! [`model::ModelSpec`].
//!
//! `harness` contains executable checks of every structural claim the
//! models make (equivariance, permutation invariance, body ordering,
//! locality, gradient consistency, smoothness across float precisions).

pub mod act;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod layer;
pub mod model;
pub mod train;
pub mod radial;
pub mod scalar;
pub mod so3;
pub mod testutil;

pub use error::{MaceError, Result};
