use serde::{Deserialize, Serialize};

use crate::adapter::LowRankAdapter;
use crate::clip::{clip_scale, effective_global_norm, LayerGradView};
use crate::config::OptimizerConfig;
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::optim::full::{adamw_update, FullAdamState};
use crate::optim::{ActiveFactor, StepReport};

/// Independent AdamW moments for each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraAdamState {
    pub u: FullAdamState,
    pub v: FullAdamState,
}

impl LoraAdamState {
    pub fn new(adapter: &LowRankAdapter) -> Self {
        let (m, n) = adapter.shape();
        let r = adapter.rank();
        LoraAdamState {
            u: FullAdamState::new(m, r),
            v: FullAdamState::new(n, r),
        }
    }
}

/// `W₀ + α U Vᵀ`.
pub fn lora_effective_weight(adapter: &LowRankAdapter, alpha: f64) -> DenseMatrix {
    adapter.w0().add(&adapter.delta().scale(alpha))
}

/// Plain LoRA: simultaneous AdamW on the raw factor gradients
/// `gU = α ∇W V`, `gV = α ∇Wᵀ U`. No projection, no calibration.
pub fn lora_adamw_step(
    adapter: &mut LowRankAdapter,
    gw: &DenseMatrix,
    state: &mut LoraAdamState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let (m, n) = adapter.shape();
    gw.expect_shape("lora_adamw_step", m, n)?;
    gw.expect_finite("gradient")?;
    let gu = gw.matmul(adapter.v()).scale(cfg.alpha);
    let gv = gw.t_matmul(adapter.u()).scale(cfg.alpha);
    let norm = effective_global_norm(&[LayerGradView::Dense(&gu), LayerGradView::Dense(&gv)]);
    let scale = clip_scale(norm, cfg.clip_threshold);
    adapter.snapshot();
    adamw_update(adapter.u_mut(), &gu, scale, &mut state.u, cfg);
    adamw_update(adapter.v_mut(), &gv, scale, &mut state.v, cfg);
    Ok(StepReport::new(norm, scale, ActiveFactor::Both))
}
