//! Temporally coherent super-resolution of smoke simulations with a
//! generator trained against a spatial and a temporal discriminator.

pub mod ablation;
pub mod advect;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fields;
pub mod infer;
pub mod losses;
pub mod nets;
pub mod plot;
pub mod rng;
pub mod sim;
pub mod tgf;
pub mod train;

pub use error::{Error, Result};
pub use fields::GridField;
