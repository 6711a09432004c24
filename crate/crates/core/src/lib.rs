//! Sequence-decoding 3D object detection on bird's-eye-view feature maps.
//!
//! Every object is read out of a dense BEV map as a short sequence of
//! continuous words (region, location, orientation, size, category). Each
//! word is predicted from a hidden state that is refreshed by sampling the
//! map at locations implied by the words decoded so far. Training matches
//! predicted sequences to ground truth with an optimal one-to-one
//! assignment and applies a set-to-set loss, so inference needs no
//! non-maximum suppression.
//!
//! The crate is self-contained: a synthetic LiDAR scene generator stands in
//! for real datasets, and a small reverse-mode differentiation engine in
//! [`numerics`] drives training.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matching;
pub mod numerics;
pub mod parallel;
pub mod scenegen;
pub mod training;
pub mod words;

pub use error::{Error, Result};
pub use geometry::Box3D;
pub use words::{ObjectSequence, WordOrder};
