//! Learned successive-refinement Wyner-Ziv coding for the quadratic-Gaussian source
//! `X = Y + N`.
//!
//! Recurrent encoders, decoders and prior models are trained end to end on a
//! variational rate-distortion objective, then evaluated against the closed-form
//! rate-distortion bounds. See the crate README for the command-line workflow.

pub mod autodiff;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod math;
pub mod model;
pub mod objective;
pub mod stochastic;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, RunConfig, Scenario, TrainConfig};
pub use error::{Error, Result};
pub use model::{MessageSet, ModelConfig, PriorKind, RefinementModel};
pub use objective::StageReport;
pub use stochastic::{RngState, SampleBatch};
