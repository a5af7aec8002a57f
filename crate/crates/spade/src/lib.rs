//! Spade: correspondence-debiased contrastive pretraining on 3D volumes.
//!
//! The pipeline registers every volume of a corpus to a template with an
//! affine transform, uses the resulting spatial correspondences to enrich
//! contrastive positives and debias memory-bank negatives, and trains a
//! small encoder/decoder with global and local projection heads plus a
//! reconstruction objective — all on synthetic phantom volumes.

pub mod affine;
pub mod bank;
pub mod error;
pub mod losses;
pub mod model;
pub mod patch;
pub mod phantom;
pub mod probe;
pub mod registration;
pub mod sampling;
pub mod trainer;
pub mod volume;

pub use error::{Result, SpadeError};
