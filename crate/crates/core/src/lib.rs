//! Automated outlier-detector search.
//!
//! A recurrent Bayesian controller samples autoencoder architectures together
//! with an outlier definition-hypothesis and a reconstruction distance; child
//! detectors share weights through a keyed parameter store and are rewarded by
//! their validation AUROC.

pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod metrics;
pub mod search;
pub mod space;
pub mod zoo;

pub use error::{AodError, Result};
