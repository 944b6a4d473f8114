//! Dense tensors, reverse-mode gradients, shared kernels and seeded randomness.

pub mod autograd;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use autograd::{gradients, Gradients, Graph, Var};
pub use kernels::{cosine, cosine_slices, kl_divergence, l2_normalize, singular_values, softmax, svd_cumvariance, Spectrum};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{stage_rng, RngState, Stage, RNG_ALGORITHM};
pub use scalar::Scalar;
pub use tensor::Tensor;
