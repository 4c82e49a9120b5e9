//! Flow-supervised attention training for a toy dual-branch diffusion model.

pub mod attention_flow;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradient_suite;
pub mod model;
pub mod par;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod visualize;
pub mod warp;

pub use error::{Error, Result};
