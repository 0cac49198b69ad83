//! Structural balance analysis of feed-forward networks.
//!
//! A network is unrolled into a weighted signed directed graph whose
//! frustration index measures how far the network is from being monotone.

pub mod error;
pub mod frustration_engine;
pub mod graph_builder;
pub mod inference;
pub mod model_ir;
pub mod monotonicity;
pub mod null_models;
pub mod report;
pub mod seeding;

pub use error::{Error, Result};
