//! Shared fixtures for the criterion benchmarks.

use resolvent_core::{ModelParams, Potential};

/// The cosine model with `v0 = 1` at the given `λ`.
pub fn cosine_model(lambda: f64) -> ModelParams {
    ModelParams::new(lambda, Potential::cosine(1.0).expect("valid amplitude")).expect("valid lambda")
}

pub fn flat_model(lambda: f64) -> ModelParams {
    ModelParams::new(lambda, Potential::zero()).expect("valid lambda")
}
