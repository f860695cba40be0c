//! Multi-manifold multi-head attention for compact vision transformers.
//!
//! The crate contains a small reverse-mode tensor engine ([`tape`]), the
//! Euclidean, SPD and Grassmann attention distance maps with early and late
//! fusion ([`attention`]), a ViT-Lite style classifier ([`model`]), data
//! loading and augmentation ([`data`]), the training loop and checkpoint
//! format ([`train`]), and independent numerical oracles ([`verification`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verification;

pub use attention::{AttentionConfig, Fusion, Manifold, ManifoldSet};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelWeights, Pool};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
