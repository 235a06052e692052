//! Tuning-free latent editing with proximal guidance.
//!
//! The crate is model-agnostic: every sampler talks to an [`EpsilonPredictor`]
//! and two desk-scale predictors ship with it, an exact Gaussian-mixture score
//! oracle and a small token self-attention denoiser that supports key/value
//! feature injection.
//!
//! Layout:
//!
//! - [`schedule`]: cumulative signal coefficients and strided sub-schedules.
//! - [`models`]: conditions, the ε-predictor contract and its realizations.
//! - [`ddim`]: deterministic DDIM stepping, inversion and reconstruction.
//! - [`prox`]: soft/hard thresholding, dynamic quantile thresholds, edit masks.
//! - [`proxnpi`]: classifier-free guidance, negative-prompt inversion and the
//!   proximal editing loop with reconstruction guidance.
//! - [`nti`]: per-step null-condition optimization baseline.
//! - [`masactrl`]: dual-branch mutual self-attention control.
//! - [`harness`]: configuration, runs, sweeps and file output.

pub mod ddim;
pub mod error;
pub mod harness;
pub mod latent;
pub mod masactrl;
pub mod models;
pub mod nti;
pub mod prox;
pub mod proxnpi;
pub mod schedule;
pub mod trajectory;

pub use error::{Error, Result};
pub use latent::Latent;
pub use models::{Condition, EpsilonPredictor, MixtureOracle, TokenDenoiser};
pub use schedule::{NoiseSchedule, Timestep};
pub use trajectory::{StepDiagnostics, Trajectory, TrajectoryStep};
