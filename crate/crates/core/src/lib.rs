//! Mobility-embedded POI representations.
//!
//! Synthetic worlds and traces ([`geodata`]), preprocessing into visit
//! sequences ([`pipeline`]), visit encoders and the transformer
//! ([`encoders`], [`seqmodel`]), the pretraining objectives
//! ([`prototypes`], [`transfer`], [`textalign`]), the training loop
//! ([`train`]) and frozen-embedding probes ([`probes`]).

pub mod encoders;
pub mod error;
pub mod geo;
pub mod geodata;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod probes;
pub mod prototypes;
pub mod seed;
pub mod seqmodel;
pub mod textalign;
pub mod timebin;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use mepoi_numcore::Real;
