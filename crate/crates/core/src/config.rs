use serde::{Deserialize, Serialize};

use crate::error::{LoftError, Result};

/// Where ε enters the adaptive denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `m̂ / (sqrt(v̂) + ε)`, the usual AdamW form.
    #[default]
    Outside,
    /// `m̂ / sqrt(v̂ + ε)`, as written in the LoFT-AdamW pseudocode.
    Inside,
}

impl EpsPlacement {
    #[inline]
    pub fn denom(self, v_hat: f64, eps: f64) -> f64 {
        match self {
            EpsPlacement::Outside => v_hat.sqrt() + eps,
            EpsPlacement::Inside => (v_hat + eps).sqrt(),
        }
    }
}

/// Which factor the first alternating step updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstFactor {
    /// Update `U` first. With LoRA init (`U = 0`) this is the only
    /// non-degenerate choice.
    #[default]
    U,
    /// Update `V` first, the literal pseudocode order.
    V,
}

/// Switches that turn off individual LoFT components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub alternating: bool,
    pub first_moment_calibration: bool,
    pub second_moment_calibration: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            alternating: true,
            first_moment_calibration: true,
            second_moment_calibration: true,
        }
    }
}

impl AblationFlags {
    /// Full LoFT.
    pub fn full() -> Self {
        Self::default()
    }

    /// Calibrated states, but both factors updated every step.
    pub fn no_alternation() -> Self {
        AblationFlags {
            alternating: false,
            ..Self::default()
        }
    }

    /// Alternating updates with both calibrations replaced by identity.
    pub fn no_calibration() -> Self {
        AblationFlags {
            alternating: true,
            first_moment_calibration: false,
            second_moment_calibration: false,
        }
    }

    /// Neither alternation nor calibration.
    pub fn neither() -> Self {
        AblationFlags {
            alternating: false,
            first_moment_calibration: false,
            second_moment_calibration: false,
        }
    }

    /// Skip only the second-moment calibration.
    pub fn simple() -> Self {
        AblationFlags {
            second_moment_calibration: false,
            ..Self::default()
        }
    }
}

/// Hyperparameters shared by every stepper. Fields a method does not use
/// are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay λ.
    pub weight_decay: f64,
    /// Muon momentum μ.
    pub momentum: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_threshold: Option<f64>,
    /// LoRA baseline scale α (`W = W₀ + α U Vᵀ`). LoFT always uses 1.
    pub alpha: f64,
    pub eps_placement: EpsPlacement,
    pub first_factor: FirstFactor,
    /// Newton–Schulz iterations for the Muon family.
    pub ns_steps: usize,
    pub flags: AblationFlags,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.95,
            clip_threshold: None,
            alpha: 1.0,
            eps_placement: EpsPlacement::Outside,
            first_factor: FirstFactor::U,
            ns_steps: 5,
            flags: AblationFlags::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(LoftError::config(field, reason))
            }
        };
        check(self.eta > 0.0 && self.eta.is_finite(), "eta", "must be a finite positive number")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.eps > 0.0 && self.eps.is_finite(), "eps", "must be positive")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be nonnegative",
        )?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        if let Some(t) = self.clip_threshold {
            check(t > 0.0 && t.is_finite(), "clip_threshold", "must be positive when set")?;
        }
        check(self.alpha.is_finite() && self.alpha != 0.0, "alpha", "must be finite and nonzero")?;
        check(self.ns_steps >= 1, "ns_steps", "must be at least 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_the_field() {
        let cfg = OptimizerConfig {
            beta2: 1.0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("beta2"), "{err}");
        assert!(OptimizerConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_flag_rejected() {
        let bad = r#"{"alternating": true, "first_moment_calibraton": false}"#;
        assert!(serde_json::from_str::<AblationFlags>(bad).is_err());
    }
}
