//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function of immutable inputs. Parallel loops
//! only split independent outputs, so every reduction runs in a fixed order
//! and results are bitwise reproducible regardless of thread count.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod shape;

pub use activation::gelu;
pub use attention::causal_attention;
pub use conv::{conv2d, conv2d_im2col, mac_probe, ConvMacRecord, ConvParams};
pub use linear::linear;
pub use loss::{softmax_cross_entropy, CrossEntropy};
pub use norm::{layer_norm, layer_norm_channels, NormLayout};
