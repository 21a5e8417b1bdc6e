//! A small deterministic CPU backprop stack.
//!
//! All trained models in this crate (decomposition, discriminator, feature
//! extractor, and the per-job reshading network) are built from the layers
//! here. Design constraints, in order:
//!
//! 1. Bit-exact reproducibility for a fixed seed: every reduction runs in a
//!    fixed order, randomness comes only from explicitly seeded generators,
//!    and the only parallelism is inside single GEMM calls that partition
//!    their output (never the accumulation axis).
//! 2. CPU throughput: convolutions lower to im2col plus `matrixmultiply`
//!    sgemm calls.
//! 3. Transparent backward passes: each layer owns its cache and its
//!    parameter gradients; models wire layers explicitly.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use conv::Conv2d;
pub use layers::{
    BilinearResize, GlobalAvgPool, InstanceNorm2d, LeakyRelu, Linear, Sigmoid, Upsample2x,
};
pub use tensor::{concat_channels, split_channels, Param, Tensor};
pub use unet::{ConvBlock, UNetCore, UnetArch};

/// Binary cross-entropy of a squashed prediction against a 0/1 target, with
/// the standard clamp guarding the logs.
pub fn bce(p: f32, target: f32) -> f32 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d bce / d p for the clamped prediction.
pub fn bce_grad(p: f32, target: f32) -> f32 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -target / p + (1.0 - target) / (1.0 - p)
}
