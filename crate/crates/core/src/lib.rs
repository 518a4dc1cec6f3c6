//! Capsule networks for text classification: tensors and reverse-mode
//! differentiation, the capsule model with static and dynamic routing,
//! optimisation, data handling and the experiment harnesses.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod ops;
pub mod optim;
pub mod real;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::{Preset, TrainConfig};
pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
