//! Numerical core for adversarial imitation learning with kernel (random
//! Fourier feature) rewards on finite MDPs.
//!
//! Everything here is allocation-based but IO-free, so the crate builds with
//! `#![no_std]` plus `alloc`. File formats, the command-line driver and the
//! experiment orchestration live in the companion `gail` crate.
//!
//! Layout:
//!
//! - [`mdp`]: tabular MDPs, policy-induced state-action chains, stationary
//!   distributions, mixing diagnostics and an average-reward policy iteration.
//! - [`features`]: state/action feature vectors and the shifted random Fourier
//!   reward map.
//! - [`policy`]: log-linear softmax policies, score functions, entropy and the
//!   regularity constants the convergence analysis needs.
//! - [`oracles`]: exact average reward, Poisson (differential Q) solves, the
//!   regularized objective and its exact gradients.
//! - [`sampling`]: trajectory simulation and unbiased stochastic gradients.
//! - [`optimize`]: alternating and greedy stochastic gradient methods, the
//!   step-size schedule, stationarity metrics and the potential monitor.
//! - [`analysis`]: reward distances, independent blocks, Rademacher
//!   complexity and generalization bounds.
#![no_std]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

extern crate alloc;

mod error;
pub mod linalg;
pub mod rng;

pub mod analysis;
pub mod features;
pub mod mdp;
pub mod optimize;
pub mod oracles;
pub mod policy;
pub mod sampling;

pub use error::{Error, Result};
pub use features::FeatureSystem;
pub use mdp::{MixingFit, PolicyChain, PolicyTable, TabularMDP};
pub use oracles::{ExactEval, KernelReward, PolicyEval};
pub use policy::{RegularityConstants, SoftmaxPolicy};
