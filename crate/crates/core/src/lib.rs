//! Med-Adapter parameter-efficient fine-tuning on a self-contained
//! tensor/autodiff core.

pub mod adapter;
pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod planner;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Fill, Tensor};
