//! Score-function estimation for continuous-time state-space models.
//!
//! The observed process is a diffusion whose drift depends on a hidden
//! diffusion; the gradient of the log-likelihood with respect to the model
//! parameters (the score) is estimated online by particle smoothers run on
//! an Euler time-discretization with step `2^-l`. Two smoothers are
//! provided, one in the state parameterization and one in a diffusion-bridge
//! parameterization, together with a coupled multilevel combination of the
//! bridge smoother and stochastic-gradient drivers for parameter estimation.

pub mod bridge;
pub mod discretization;
pub mod estimation;
mod linalg;
pub mod model;
pub mod multilevel;
pub mod rng;
pub mod sampling;
pub mod smoother_bridge;
pub mod smoother_direct;
pub mod stats;

pub use discretization::{Grid, HiddenPath, ObsRecord};
pub use estimation::{RmlOptions, ScoreBackend, StepSchedule};
pub use model::{builtin_model, BuiltinModel, Dims, FixedParams, Model, Theta};
pub use multilevel::MlConfig;
pub use smoother_direct::{Cost, ScoreEstimate};
