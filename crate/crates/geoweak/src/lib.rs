//! Weakly supervised school detection from aerial imagery.
//!
//! The pipeline turns sparse geolocated school points into an auto-labeled
//! object-detection dataset, trains detectors in two stages (noisy pretrain,
//! clean fine-tune), searches hyperparameters under a strict evaluation
//! budget, and reports standard detection metrics.

pub mod autolabel;
pub mod bbox;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filtering;
pub mod geo;
pub mod hpo;
pub mod imagery;
pub mod overpass;
pub mod plot;
pub mod report;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
