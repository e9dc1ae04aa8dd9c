//! Joint diffusion laboratory: a single UNet trained as a denoiser on all data
//! and as a multi-label classifier on a labeled fraction, plus classifier-guided
//! sampling, counterfactual generation and the evaluation protocol, all on
//! procedurally generated chest phantoms.

pub mod autodiff;
pub mod autoencoder;
pub mod counterfactual;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pgm;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ClassTarget, Denoiser, JointModel, UNetConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
