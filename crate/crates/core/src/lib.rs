//! Identification of low-dimensional linear models with control inputs from
//! snapshot data.
//!
//! Two identification routes are provided:
//!
//! * [`dmdc`]: dynamic mode decomposition with control, followed by a
//!   projection onto the leading left singular vectors of the shifted
//!   snapshots.
//! * [`omdc`]: optimal mode decomposition with control, which optimizes the
//!   mode subspace jointly with the reduced system and input matrices by
//!   conjugate gradient on the Grassmann manifold ([`grassmann`]).
//!
//! [`dryer`] is a finite-volume simulator of a drying wood chip that produces
//! snapshot data for the pipeline, and [`romsim`] runs and evaluates
//! identified models.

pub mod decomp;
pub mod dmdc;
pub mod dryer;
pub mod error;
pub mod grassmann;
pub mod matstore;
pub mod omdc;
pub mod romsim;

pub use error::{Error, Result};
pub use matstore::{Method, RomModel, SnapshotSet};

/// Dense column-major matrix used throughout the crate.
pub type Mat = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;
