//! Full-parameter reference optimizers: the dynamics LoFT is meant to reproduce.

use serde::{Deserialize, Serialize};

use crate::clip::clip_scale;
use crate::config::OptimizerConfig;
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::optim::{ActiveFactor, StepReport};

/// AdamW moments for a dense parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullAdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub step: u64,
}

impl FullAdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        FullAdamState {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// Heavy-ball state in EMA form, `m ← β₁ m + (1−β₁) g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumState {
    pub m: DenseMatrix,
    pub step: u64,
}

impl MomentumState {
    pub fn new(rows: usize, cols: usize) -> Self {
        MomentumState {
            m: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// Clip a dense gradient by its own Frobenius norm; returns `(norm, scale)`.
pub(crate) fn clip_dense(g: &DenseMatrix, threshold: Option<f64>) -> (f64, f64) {
    let norm = g.fro_norm();
    (norm, clip_scale(norm, threshold))
}

/// One AdamW update of `param` given its moments. Shared with the LoRA
/// baseline, which runs this per factor.
pub(crate) fn adamw_update(
    param: &mut DenseMatrix,
    g: &DenseMatrix,
    grad_scale: f64,
    state: &mut FullAdamState,
    cfg: &OptimizerConfig,
) {
    state.step += 1;
    let k = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(k);
    let bc2 = 1.0 - b2.powi(k);
    let decay = 1.0 - cfg.weight_decay * cfg.eta;
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((w, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
        let gi = gi * grad_scale;
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let step = (*mi / bc1) / cfg.eps_placement.denom(*vi / bc2, cfg.eps);
        *w = decay * *w - cfg.eta * step;
    }
}

/// Reference AdamW with decoupled weight decay.
pub fn adamw_full_step(
    w: &mut DenseMatrix,
    gw: &DenseMatrix,
    state: &mut FullAdamState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    gw.expect_shape("adamw_full_step", w.rows(), w.cols())?;
    state.m.expect_shape("adamw_full_step state", w.rows(), w.cols())?;
    gw.expect_finite("gradient")?;
    let (norm, scale) = clip_dense(gw, cfg.clip_threshold);
    adamw_update(w, gw, scale, state, cfg);
    Ok(StepReport::new(norm, scale, ActiveFactor::Full))
}

/// Gradient descent with EMA momentum: `W ← (1−λη) W − η m`.
pub fn gd_momentum_full_step(
    w: &mut DenseMatrix,
    gw: &DenseMatrix,
    state: &mut MomentumState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    gw.expect_shape("gd_momentum_full_step", w.rows(), w.cols())?;
    state.m.expect_shape("gd_momentum_full_step state", w.rows(), w.cols())?;
    gw.expect_finite("gradient")?;
    let (norm, scale) = clip_dense(gw, cfg.clip_threshold);
    let b1 = cfg.beta1;
    state.step += 1;
    state.m.blend_assign(b1, (1.0 - b1) * scale, gw);
    w.blend_assign(1.0 - cfg.weight_decay * cfg.eta, -cfg.eta, &state.m);
    Ok(StepReport::new(norm, scale, ActiveFactor::Full))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            eta: 0.1,
            ..Default::default()
        }
    }

    #[test]
    fn first_adam_step_is_sign_like() {
        let mut w = DenseMatrix::zeros(2, 2);
        let g = DenseMatrix::from_rows(&[[2.0, -0.5], [1e-3, 0.0]]).unwrap();
        let mut st = FullAdamState::new(2, 2);
        let c = cfg();
        adamw_full_step(&mut w, &g, &mut st, &c).unwrap();
        for (wi, gi) in w.data().iter().zip(g.data()) {
            let expected = -c.eta * gi / (gi.abs() + c.eps);
            assert!((wi - expected).abs() < 1e-15, "{wi} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut w = DenseMatrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let start = w.clone();
        let c = OptimizerConfig { weight_decay: 0.5, ..cfg() };
        let mut st = FullAdamState::new(1, 2);
        let z = DenseMatrix::zeros(1, 2);
        for _ in 0..4 {
            adamw_full_step(&mut w, &z, &mut st, &c).unwrap();
        }
        let f = (1.0f64 - 0.05).powi(4);
        assert!(w.dist(&start.scale(f)) < 1e-15);
    }

    #[test]
    fn momentum_without_beta_is_plain_gd() {
        let mut w = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = DenseMatrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let c = OptimizerConfig { beta1: 0.0, ..cfg() };
        let mut st = MomentumState::new(1, 2);
        gd_momentum_full_step(&mut w, &g, &mut st, &c).unwrap();
        assert_eq!(w, DenseMatrix::from_rows(&[[0.95, 2.1]]).unwrap());
    }

    #[test]
    fn momentum_converges_to_constant_gradient() {
        let mut w = DenseMatrix::zeros(1, 1);
        let g = DenseMatrix::from_rows(&[[3.0]]).unwrap();
        let c = OptimizerConfig { beta1: 0.5, ..cfg() };
        let mut st = MomentumState::new(1, 1);
        for k in 1..=20 {
            gd_momentum_full_step(&mut w, &g, &mut st, &c).unwrap();
            assert!((st.m[(0, 0)] - 3.0 * (1.0 - 0.5f64.powi(k))).abs() < 1e-14);
        }
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let g = DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let c = OptimizerConfig { beta1: 0.0, clip_threshold: Some(1.0), ..cfg() };
        let mut w = DenseMatrix::zeros(1, 2);
        let mut st = MomentumState::new(1, 2);
        let rep = gd_momentum_full_step(&mut w, &g, &mut st, &c).unwrap();
        assert_eq!(rep.grad_norm, 5.0);
        assert!((rep.clip_scale - 0.2).abs() < 1e-15);
        assert!(w.dist(&g.scale(-0.1 * 0.2)) < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = DenseMatrix::zeros(2, 2);
        let mut st = FullAdamState::new(2, 2);
        assert!(adamw_full_step(&mut w, &DenseMatrix::zeros(2, 3), &mut st, &cfg()).is_err());
    }
}
