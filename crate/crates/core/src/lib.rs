//! Goal-conditioned push/grasp lab: a deterministic 2D tabletop, orthographic
//! perception with rotated observation stacks, pixel-wise Q-networks, a
//! staged training curriculum and an evaluation protocol.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod grid;
pub mod learning;
pub mod nn;
pub mod perception;
pub mod policy;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
