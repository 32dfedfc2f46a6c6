//! Numerical laboratory for maximal-regularity estimates of the linearized
//! and full compressible Navier-Stokes equations in a box.

pub mod besov;
pub mod error;
pub mod grid;
pub mod lagrangian;
pub mod lame;
pub mod lincns;
pub mod semigroup;
pub mod solver;
pub mod sparse;
pub mod varcoef;

pub use error::{Error, Result};
