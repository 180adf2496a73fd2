//! Hasegawa-Wakatani drift-wave turbulence laboratory: a finite-difference
//! solver, flux diagnostics, snapshot-pair datasets, and an FI-Conv
//! surrogate trained and inverted with the `hwlab-autodiff` engine.

pub mod dataset;
pub mod diagnostics;
mod error;
pub mod ficonv;
pub mod hwsim;
pub mod learn;
pub mod numerics;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub use hwlab_autodiff as autodiff;
