//! ConvNeXt-based visual encoding for multimodal language models.
//!
//! The crate bundles a small tensor library with tape-based autodiff, a
//! hierarchical ConvNeXt encoder with an optional fifth stage, an image
//! preprocessing pipeline, a projector + toy causal LM for end-to-end
//! training, an analytic cost model and a binary checkpoint format.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autograd::{ConvAlgo, Gradients, Graph, Var};
pub use encoder::{build_encoder, encode, freeze_mask, EncoderConfig, EncoderState, FreezeSpec, VisualTokens};
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
