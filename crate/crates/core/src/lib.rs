//! Reconstruction of an object's trajectory relative to a grasping hand,
//! constrained to one rotational degree of freedom about a latent axis and
//! fitted jointly over all frames against silhouette masks and contact terms.

pub mod axisfit;
pub mod bundle;
pub mod contact;
pub mod curve;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimize;
pub mod render;
pub mod sequence;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
