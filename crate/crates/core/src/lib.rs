//! Value-oriented forecast reconciliation for renewable producers trading in a
//! forward market as a portfolio.

pub mod allocation;
pub mod baseforecast;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod hierarchy;
pub mod market;
pub mod neural;
pub mod reconcile;
pub mod verify;

pub use error::{Error, Result};
