//! Calibration of near-infrared spectra with ensembles of small neural
//! networks.
//!
//! The crate covers the whole chain from spectra files to concentration
//! predictions with confidence intervals: preprocessing, projection onto a
//! few latent directions, Levenberg–Marquardt-trained perceptrons, bootstrap
//! and cross-validation ensembles, a PLS regression baseline, a synthetic
//! data generator and a learning-curve experiment driver.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod evalx;
pub mod features;
pub mod linmodel;
pub mod mlp;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod spectra;
pub mod synthgen;

pub use error::{Error, Result};
