//! Koopman operator approximation via LMI-reformulated EDMD/DMDc regression,
//! with asymptotic-stability constraints and (weighted) H-infinity norm
//! regularizers, plus analysis tools for the identified discrete-time linear
//! systems.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod constrained;
pub mod datagen;
pub mod dmdc;
pub mod error;
pub mod lifting;
pub mod lti;
pub mod regressors;
pub mod sdp;
pub mod snapshots;

pub use error::{Error, Result};
