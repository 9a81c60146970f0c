//! Light-weight cascaded deformable registration trained with an adversarial
//! teacher-distillation objective.
//!
//! The crate is organized bottom-up: a small reverse-mode tensor engine whose
//! backward passes are themselves differentiable ([`tape`], [`kernels`]),
//! deformation-field algebra ([`deform`]), the registration and discriminator
//! networks ([`net`]), the training objectives ([`loss`]), the optimizer and
//! training loop ([`optim`], [`train`], [`checkpoint`]), synthetic data
//! generation and volume I/O ([`data`]), and evaluation metrics plus the
//! gradient-check suite ([`metrics`], [`gradcheck`]).

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volio;

pub use deform::{DisplacementField, MaskVolume, Volume};
pub use error::{Error, Result};
pub use loss::LossWeights;
pub use net::{DiscConfig, ParamSet, StudentConfig};
pub use tape::{KernelCache, NodeId, Tape};
pub use tensor::Tensor;
