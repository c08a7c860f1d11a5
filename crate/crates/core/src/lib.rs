//! Correlation-supervised speech-to-rig-curve animation.
//!
//! A transformer over control-rig tokens classifies emotion from its
//! inter-rig attention scores; a TCN generator maps speech features to rig
//! curves and is trained with that classifier frozen as an extra loss.

pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod audiofeat;
pub mod cli;
pub mod container;
pub mod corrnet;
pub mod emotion;
pub mod evalkit;
pub mod genet;
pub mod rigmodel;
pub mod synthgen;
pub mod trainer;

pub use emotion::EmotionLabel;
