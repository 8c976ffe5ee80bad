//! Federated learning simulator with privacy-preference-aware local
//! differential privacy.
//!
//! Clients score how strongly each layer's gradient reacts to annotated
//! privacy-sensitive image regions, spend less of their privacy budget on the
//! layers that react most, and the server weights received updates by the
//! same score measured on a small public set. A gradient-inversion harness
//! measures how much of the sensitive regions an attacker can still recover.

pub mod attack;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{GradientSet, Layer, LossKind, Model, ParamBlock};
pub use tensor::Tensor;
