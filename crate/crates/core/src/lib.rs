//! Vector-quantization perturbation laboratory.
//!
//! Distance-weighted codeword resampling, its KL-divergence analytics and
//! boundedness checks, and a desk-scale semi-supervised segmentation trainer
//! built on a small reverse-mode tensor engine.
//!
//! Every numeric type is generic over [`Scalar`]; the aliases at the crate
//! root fix the scalar to `f64`.

pub mod alignment;
pub mod cli;
pub mod codebook;
pub mod error;
pub mod metrics;
pub mod perturbation;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Var};

pub type Tensor = tensor::Tensor<f64>;
pub type Codebook = codebook::Codebook<f64>;
pub type QuantizedMap = codebook::QuantizedMap<f64>;
pub type PerturbationKernel = perturbation::PerturbationKernel<f64>;
pub type PerturbedMarginal = perturbation::PerturbedMarginal<f64>;
pub type MarginalBounds = perturbation::MarginalBounds<f64>;
pub type DropoutKl = perturbation::DropoutKl<f64>;
pub type PatchFeatureMap = alignment::PatchFeatureMap<f64>;
pub type FrozenExtractor = alignment::FrozenExtractor<f64>;
pub type SyntheticSample = pipeline::SyntheticSample<f64>;
pub type SegModel = pipeline::SegModel<f64>;
pub type Trainer = pipeline::Trainer<f64>;
pub type TrainRun = pipeline::TrainRun<f64>;
