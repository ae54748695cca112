//! Segmental speech encoder trained to speak the language of frozen
//! image and text embedding spaces.
//!
//! Speech frames are encoded, cut into word-like segments where adjacent
//! frames stop resembling each other, pooled, and fed as a pseudo-token
//! sequence to a frozen text encoder. The encoder is trained so that the
//! resulting sentence embedding retrieves the paired image from a frozen
//! pool, optionally with its segments pulled toward a vocabulary table.

pub mod alignment;
pub mod checks;
pub mod corpus;
pub mod encoder;
pub mod eval;
mod error;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
