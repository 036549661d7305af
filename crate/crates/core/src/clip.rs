//! Global-norm gradient clipping measured on the effective gradient.
//!
//! A LoFT step on `U` moves `W` along `g̃U Vᵀ = ∇W·𝒫_V`, so that product is
//! what a full fine-tuning run would have clipped. Its norm is computed
//! from `r×r` Gram matrices, never from the dense `m×n` product.

use crate::linalg::{lowrank_fro_norm_sq_gram, DenseMatrix};

/// What one layer contributes to the global gradient norm.
#[derive(Debug, Clone, Copy)]
pub enum LayerGradView<'a> {
    /// Scaled gradient of the factor being stepped and the other factor;
    /// the effective gradient is `active · inactiveᵀ`.
    LowRank {
        active: &'a DenseMatrix,
        inactive: &'a DenseMatrix,
    },
    /// A full-parameter gradient.
    Dense(&'a DenseMatrix),
}

impl LayerGradView<'_> {
    pub fn norm_sq(&self) -> f64 {
        match self {
            LayerGradView::LowRank { active, inactive } => {
                lowrank_fro_norm_sq_gram(&active.t_matmul(active), &inactive.t_matmul(inactive))
            }
            LayerGradView::Dense(g) => g.fro_norm_sq(),
        }
    }
}

/// `sqrt(Σ_layers ‖effective gradient‖²_F)`.
pub fn effective_global_norm(layers: &[LayerGradView<'_>]) -> f64 {
    layers.iter().map(LayerGradView::norm_sq).sum::<f64>().sqrt()
}

/// `min(1, threshold / norm)`; `None` disables clipping.
pub fn clip_scale(norm: f64, threshold: Option<f64>) -> f64 {
    match threshold {
        Some(t) if norm > t => t / norm.max(f64::MIN_POSITIVE),
        _ => 1.0,
    }
}
