//! Desk-scale score distillation.
//!
//! Analytic Gaussian-mixture diffusion models stand in for a pretrained
//! text-to-image network, a differentiable 2D splat renderer stands in for a
//! 3D representation, and the distillation losses (SDS, negative-prompt, and
//! variational distribution mapping with coefficient annealing) drive the
//! renderer parameters toward the conditional distribution.




pub mod analysis;
pub mod cli;
pub mod config;
pub mod degradation;
pub mod distill;
pub mod error;
pub mod mixture;
pub mod optim;
pub mod renderer;
pub mod schedule;

mod vecmath;

pub use error::{Error, Result};
pub use mixture::{diffuse, ConditionedMixture, NULL_CONDITION};
pub use schedule::{NoiseSchedule, ScheduleKind, WeightKind};
