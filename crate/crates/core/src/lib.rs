//! Patrol data handling, risk prediction and evaluation for anti-poaching planning.

pub mod error;
pub mod griddata;
pub mod io;
pub mod iware;
pub mod learners;
pub mod metrics;
pub mod riskmap;
pub mod synthpark;

pub use error::{Error, Result};
