//! Monte Carlo laboratory for vacant sets of Wiener sausages and Brownian
//! interlacements.
//!
//! The crate simulates Brownian motions in `R^d` (d >= 3), builds the unions
//! of unit balls swept along their paths ("sausages"), and measures geometric
//! events about the vacant set left behind: multi-component vacancy in small
//! balls, hemiball visit coverage, excursion cascades, and component counts of
//! interlacement vacant sets in annuli.  Everything is organized around
//! reproducible per-trial RNG streams so that estimates are bit-stable across
//! worker counts.

pub mod brownian;
pub mod cascade;
pub mod cli;
pub mod experiments;
pub mod geometry;
pub mod interlacements;
pub mod point;
pub mod rng;
pub mod sausage;
pub mod stats;
pub mod union_find;

pub use point::Point;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular input: {0}")]
    SingularInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
