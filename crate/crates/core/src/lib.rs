//! Adversarially trained generative flows with Wasserstein-1 and
//! Wasserstein-2 proximal regularization.

pub mod autodiff;
pub mod divergence;
pub mod nn;
pub mod oracles;
pub mod datasets;
pub mod flow;
pub mod indicators;
