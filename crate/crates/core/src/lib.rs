//! Low-rank tensor completion with a trace-regularized fully-connected
//! tensor network (FCTN) model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, mode permutation, generalized unfolding and
//!   contraction.
//! - [`network`]: FCTN factors, full and leave-one-out composition, and the
//!   partial-contraction reuse cache.
//! - [`regularizer`]: the periodic second-difference operator and its
//!   Fourier diagonalization.
//! - [`sylvester`]: the closed-form factor update.
//! - [`solver`]: the proximal alternating minimization loop, baseline and
//!   accelerated.
//! - [`metrics`]: PSNR, SSIM and relative error.
//! - [`io`]: binary tensor/mask files, mask sampling, netpbm import and run
//!   reports.
//! - [`bench`]: the baseline-vs-accelerated benchmark harness.

pub mod bench;
pub mod error;
pub mod io;
pub mod metrics;
pub mod network;
pub mod regularizer;
pub mod solver;
pub mod sylvester;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{FctnFactors, FctnRank, FlopCounter, ReuseCache, UpdateOrder};
pub use tensor::{DenseTensor, ModePermutation, UnfoldingSpec};
