//! Deep BSDE solver for fully-coupled forward-backward SDEs.
//!
//! The crate is `no_std` (it needs `alloc`) and contains the numerical core:
//!
//! - [`autodiff`]: dense matrices with a reverse-mode tape,
//! - [`nn`]: tanh multilayer perceptrons and Adam,
//! - [`problem`]: the FBSDE abstraction, Lipschitz bundles and the built-in
//!   benchmark equations,
//! - [`sde`]: seeded Brownian increments, the unrolled Euler scheme and
//!   fine-grid reference rollouts,
//! - [`solver`]: training, error evaluation and convergence studies,
//! - [`conditions`]: the sufficient convergence conditions and their search,
//! - [`riccati`]: reference decoupling fields for the linear-quadratic problems.
//!
//! IO, configuration files and the command line live in the `fbsde-cli` crate.

#![no_std]
// `!(x > 0.0)` is deliberate throughout: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod autodiff;
pub mod conditions;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod problem;
pub mod real;
pub mod riccati;
pub mod rng;
pub mod sde;
pub mod solver;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
