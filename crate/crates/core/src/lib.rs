//! Black-box privacy auditing for time-series imputation models.
//!
//! The crate bundles two attacks against an imputation model that can only be
//! queried with masked series:
//!
//! * a membership inference attack scoring each suspect series by the ratio of
//!   the target model's reconstruction loss to a reference model's loss
//!   ([`mia`]), and
//! * a sliding-window attribute inference attack that masks windows, detects
//!   peaks in the reconstruction and scores them against the ground truth
//!   ([`aia`]).
//!
//! [`pipeline`] links the two: the series ranked most at risk by the
//! membership score are attacked on regions the attacker never observed.

pub mod aia;
pub mod dataset;
pub mod error;
pub mod imputers;
pub mod metrics;
pub mod mia;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod signal_math;
pub mod synthetic;

pub use error::{Error, Result};
