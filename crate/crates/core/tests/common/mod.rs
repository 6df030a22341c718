//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod ops;
pub mod oracles;
