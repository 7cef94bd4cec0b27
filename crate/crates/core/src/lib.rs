//! Graph stacked hourglass networks for lifting 2D human joint positions to 3D.
//!
//! The crate is self-contained: [`autograd`] provides the differentiable tensor
//! engine, [`skeleton`] the three-scale joint hierarchy, [`layers`] and
//! [`hourglass`] the graph building blocks, and [`network`] assembles the
//! stacked-hourglass model and the sequential-residual baseline. [`data`],
//! [`training`] and [`evaluation`] cover the rest of the pipeline, and
//! [`suites`] holds the finite-difference gradient checks.

pub mod autograd;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hourglass;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod params;
pub mod skeleton;
pub mod suites;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{Elementwise, GradientMap, Graph, Mode, RunningStats, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
