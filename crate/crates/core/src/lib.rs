//! Independent-Component (IC) layer laboratory.
//!
//! An IC layer is BatchNorm followed by Dropout, placed directly in front of a
//! weight layer. This crate provides the dense tensor substrate, differentiable
//! layers with exact backward passes, residual network builders for the
//! baseline and three IC unit layouts, the information-theoretic oracles for
//! gated variables, conditioning and sign-coherence experiments, and a small
//! training stack (data loaders, augmentation, Adam/SGD, schedules, metrics).
//!
//! Keep probability convention: every library API takes `p_keep`, the
//! probability that a gate passes its input. Drop rates only appear at the
//! configuration boundary, where `p_keep = 1 - drop_rate`.

pub mod convergence;
pub mod error;
pub mod infotheory;
pub mod layers;
pub mod resnet;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Element, Tensor};
