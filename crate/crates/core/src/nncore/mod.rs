//! Dense math and the differentiable layers the backbone needs.

pub mod checkpoint;
pub mod layers;
mod matrix;
pub mod network;
pub mod optim;
mod params;

pub use matrix::Matrix;
pub use network::{forward, loss_and_grads, ArchSpec};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamSet};
