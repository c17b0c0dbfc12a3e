//! Bayesian errors-in-variables (EiV) regression with Monte Carlo dropout.
//!
//! Observed inputs are modelled as noisy versions of unknown true inputs,
//! `x = zeta + eps_x`, `y = f_theta(zeta) + eps_y`. Training minimizes a
//! Monte-Carlo estimate of the negative ELBO with the input noise tied to the
//! output noise through a Deming factor; prediction averages the network over
//! dropout draws and latent-input draws and splits the resulting uncertainty
//! into epistemic and aleatoric parts.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model_io;
pub mod nn;
pub mod predictor;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{EivError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
