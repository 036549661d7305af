//! Low-rank adapter optimizers whose updates track full-parameter training.
//!
//! The crate implements the LoFT family of optimizers for a single linear
//! map `W = W₀ + U Vᵀ`: gradient descent, momentum, AdamW and Muon variants
//! that step one factor at a time, rescale factor gradients by the inverse
//! Gram matrix of the other factor, and transport their moment estimates
//! between consecutive low-rank subspaces. Next to them sit the
//! full-parameter optimizers they reproduce, the plain LoRA baseline, a set
//! of synthetic matrix-factorization problems and an experiment harness.
//!
//! ```
//! use loft::adapter::{effective_weight, init_adapter};
//! use loft::config::{FirstFactor, OptimizerConfig};
//! use loft::linalg::DenseMatrix;
//! use loft::loft_state::LoftAdamState;
//! use loft::optim::loft_adamw_step;
//! use loft::problems::{gen_rank_r_target, mf_loss_grad, LossConvention};
//!
//! let target = gen_rank_r_target(16, 8, 2, 0)?;
//! let mut adapter = init_adapter(16, 8, 2, 1, DenseMatrix::zeros(16, 8))?;
//! let mut state = LoftAdamState::new(&adapter, FirstFactor::U);
//! let cfg = OptimizerConfig { eta: 0.05, ..Default::default() };
//!
//! let (start, _) = mf_loss_grad(&effective_weight(&adapter), &target, LossConvention::Full)?;
//! for _ in 0..200 {
//!     let (_, grad) = mf_loss_grad(&effective_weight(&adapter), &target, LossConvention::Full)?;
//!     loft_adamw_step(&mut adapter, &grad, &mut state, &cfg)?;
//! }
//! let (end, _) = mf_loss_grad(&effective_weight(&adapter), &target, LossConvention::Full)?;
//! assert!(end < 0.01 * start);
//! # Ok::<(), loft::LoftError>(())
//! ```
//!
//! The `book/` directory at the repository root walks through the
//! construction chapter by chapter; every Rust snippet in it is compiled
//! and run as a doctest.

pub mod adapter;
pub mod clip;
pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loft_state;
pub mod muon;
pub mod optim;
pub mod problems;

pub use error::{LoftError, Result};

/// The book's chapters, compiled so `cargo test --doc` runs their listings.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/factorization.md")]
    mod factorization {}
    #[doc = include_str!("../../../book/src/moments.md")]
    mod moments {}
    #[doc = include_str!("../../../book/src/optimizers.md")]
    mod optimizers {}
    #[doc = include_str!("../../../book/src/clipping.md")]
    mod clipping {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
