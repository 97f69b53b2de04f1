//! Distributed connected-component labeling over simulated ranks, and a
//! feature-tracking pipeline built on it.

pub mod balance;
pub mod dufind;
pub mod error;
pub mod idspace;
pub mod mesh;
pub mod pipeline;
pub mod synth;
pub mod trajectory;
pub mod transport;

pub use error::{Error, Result};
