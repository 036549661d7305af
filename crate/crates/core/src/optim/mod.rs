//! AdamW/GD-family steppers: full-parameter references, the LoRA baseline,
//! and the LoFT variants.

mod full;
mod loft;
mod lora;

use serde::{Deserialize, Serialize};

pub use full::{adamw_full_step, gd_momentum_full_step, FullAdamState, MomentumState};
pub use loft::{
    loft_adamw_step, loft_adamw_step_layers, loft_gd_momentum_step, loft_gd_step, LoftLayer,
};
pub use lora::{lora_adamw_step, lora_effective_weight, LoraAdamState};

pub(crate) use full::clip_dense;
pub(crate) use loft::{active_factor, apply_direction, muon_moment_update, prepare_layer};

/// Which parameters a step changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveFactor {
    U,
    V,
    Both,
    Full,
}

/// Per-step diagnostics returned by every stepper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Effective-gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradient by clipping (1 when inactive).
    pub clip_scale: f64,
    pub active: ActiveFactor,
    /// Second-moment entries clamped at zero during this step.
    pub clamped: u64,
}

impl StepReport {
    pub(crate) fn new(grad_norm: f64, clip_scale: f64, active: ActiveFactor) -> Self {
        StepReport {
            grad_norm,
            clip_scale,
            active,
            clamped: 0,
        }
    }
}
