//! Image classification toolkit: tensors with reverse-mode gradients, a
//! compact CNN, MixUp/CutMix, FGSM, class activation maps and evaluation
//! metrics.

pub mod adversarial;
pub mod augment;
pub mod datapipe;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, GradTape, Tensor, Var};
