pub mod cli;
pub mod config;
pub mod critic;
pub mod envs_data;
pub mod error;
pub mod plot;
pub mod policy_flow;
pub mod policy_gauss;
pub mod rng;
pub mod tensor_nn;
pub mod theory_checks;
pub mod trainer;

pub use error::{Error, Result};
