//! ISTA for sparse super-resolution, two ways: an exact matrix-form solver
//! for the l1-regularized least-squares objective, and ISTAR, the unfolded
//! network that replaces the solver's linear operators and thresholds with
//! learned convolutions.
//!
//! The crate is self-contained: dense tensors with reverse-mode autodiff,
//! the Adam optimizer, bicubic degradation, PSNR/SSIM evaluation, and a
//! deterministic training loop.

pub mod autodiff;
pub mod bicubic;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod element;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod solver;
pub mod tensor;
pub mod train;

pub use autodiff::{GradCheckReport, Graph, NodeId};
pub use data::ImagePair;
pub use element::Element;
pub use error::{Error, Result};
pub use metrics::MetricMode;
pub use model::{IstarModel, ModelConfig};
pub use optim::ParamStore;
pub use solver::{IstaProblem, IstaSolverConfig, IstaTrace};
pub use tensor::Tensor;
pub use train::{EvalReport, TrainConfig};
