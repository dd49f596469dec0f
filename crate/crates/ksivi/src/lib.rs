//! Kernel semi-implicit variational inference.
//!
//! Trains semi-implicit variational families against score-based targets by
//! minimizing the kernel Stein discrepancy (KSD). The KSD admits a tractable
//! form for semi-implicit distributions because the intractable marginal
//! score can be replaced by the conditional score inside kernel integrals,
//! so the objective and its reparameterized gradients need only samples,
//! kernel values, and target scores.
//!
//! Modules:
//! - [`tensor`]: dense tensors, a reverse-mode tape, and small MLPs.
//! - [`kernels`]: RBF / IMQ / smoothed Riesz kernels, gradients, the median
//!   bandwidth heuristic, and the Stein kernel.
//! - [`targets`]: score-based target distributions and annealed paths.
//! - [`family`]: semi-implicit families and the hierarchical stack.
//! - [`objective`]: the KSD objective, witness function, the two stochastic
//!   gradient estimators, and variance diagnostics.
//! - [`train`]: optimizers, schedules, and the training loops.
//! - [`mcmc`]: SGLD / MALA ground-truth samplers and annealed Langevin.
//! - [`metrics`]: MMD, sliced Wasserstein, KSD metric, mode coverage.

pub mod error;
pub mod family;
pub mod kernels;
pub mod mcmc;
pub mod metrics;
pub mod objective;
pub mod rng;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
