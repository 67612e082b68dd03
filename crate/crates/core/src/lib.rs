//! Desk-scale simulator of federated test-time adaptation with a poisoning
//! adversary.

pub mod attack;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod neural;
pub mod rng;
pub mod tta;

pub use error::{Error, Result};
