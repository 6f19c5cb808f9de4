pub mod checkpoint;
pub mod data;
pub mod diet;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{grad_check, Graph, Tensor, Var};
pub use vit::{BackboneParams, ViTConfig};
