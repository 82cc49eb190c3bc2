//! Vetting of multi-depth shift-and-stack cutouts.
//!
//! Synthetic observation sequences are median-stacked at several depths,
//! aligned on the channel axis, classified by small CNNs with optional
//! convolutional block attention, and triaged by a dual-threshold policy
//! that sends only ambiguous candidates to a human reviewer.

pub mod attention;
pub mod canonical;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod par;
pub mod tensor;
pub mod training;
pub mod triage;

pub use error::{Error, Result};
pub use tensor::{Graph, Parameter, Scalar, Tensor, Var};
