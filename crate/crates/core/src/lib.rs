//! Equity auditing for brain tumour segmentation models.

pub mod cohort;
pub mod error;
pub mod inequality;
pub mod league;
pub mod lme;
pub mod metrics;
pub mod representational;
pub mod spatial;
pub mod stats;
pub mod synthetic;
pub mod univariate;
pub mod volume;

pub use error::{Error, Result};
