//! Neural-weighted least-squares n-jet fitting on unstructured point clouds.
//!
//! A point-set network predicts one weight per neighbor; the weights enter a
//! weighted least-squares fit of a bivariate polynomial height function, from
//! which normals and principal curvatures are read off. Everything from the
//! network input to the fitted normal is differentiable, so the weights are
//! trained end-to-end.

pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod jet;
pub mod neighborhood;
pub mod train;
pub mod weightnet;

pub use error::{Error, Result};
