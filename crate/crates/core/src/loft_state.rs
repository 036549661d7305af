//! Optimizer-state calibration.
//!
//! Moment buffers live in factor coordinates: `mᵁ` is `m×r` and stands for
//! the full-space estimate `mᵁ Vᵀ`. When `V` moves between steps the
//! buffer must be re-expressed in the new coordinates, which is what the
//! calibration matrix `Cⱽ = (V_prevᵀ V)(VᵀV)⁻¹` does: `mᵁ Cⱽ Vᵀ =
//! mᵁ V_prevᵀ 𝒫_V`, i.e. the old estimate projected onto the new subspace.
//!
//! Second moments are not linear in the gradient, so they are kept as
//! face-split cross terms `pᵁ` (`m×r²`). Column `a·r + b` of a row holds
//! the product of entries `a` and `b` of the corresponding scaled-gradient
//! row, and `pᵁ (Vᵀ ∗ Vᵀ)` recovers the elementwise square of the
//! reconstructed gradient exactly. Transport uses `Cⱽ ⊗ Cⱽ`.

use serde::{Deserialize, Serialize};

use crate::adapter::{FactorGrams, LowRankAdapter, ScaledGrads};
use crate::config::{AblationFlags, FirstFactor};
use crate::error::{LoftError, Result};
use crate::linalg::{face_split_unchecked, kron, row_square_khatri_rao, DenseMatrix, GramInverse};

/// Alternation bookkeeping shared by every LoFT stepper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alternation {
    /// Completed optimizer steps.
    pub step: u64,
    pub update_u_next: bool,
}

impl Alternation {
    pub fn new(first: FirstFactor) -> Self {
        Alternation {
            step: 0,
            update_u_next: first == FirstFactor::U,
        }
    }

    /// Advance one step, toggling the active factor when alternating.
    pub(crate) fn advance(&mut self, alternating: bool) {
        self.step += 1;
        if alternating {
            self.update_u_next = !self.update_u_next;
        }
    }
}

/// Moments of LoFT-AdamW in factor coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoftAdamState {
    pub mu: DenseMatrix,
    pub mv: DenseMatrix,
    pub pu: DenseMatrix,
    pub pv: DenseMatrix,
    pub alternation: Alternation,
    /// Reconstructed second-moment entries clamped at zero so far.
    pub clamp_events: u64,
}

impl LoftAdamState {
    pub fn new(adapter: &LowRankAdapter, first: FirstFactor) -> Self {
        let (m, n) = adapter.shape();
        let r = adapter.rank();
        LoftAdamState {
            mu: DenseMatrix::zeros(m, r),
            mv: DenseMatrix::zeros(n, r),
            pu: DenseMatrix::zeros(m, r * r),
            pv: DenseMatrix::zeros(n, r * r),
            alternation: Alternation::new(first),
            clamp_events: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.alternation.step
    }

    /// Check buffer shapes against an adapter, e.g. after restoring a checkpoint.
    pub fn check_against(&self, adapter: &LowRankAdapter) -> Result<()> {
        let (m, n) = adapter.shape();
        let r = adapter.rank();
        self.mu.expect_shape("LoftAdamState mU", m, r)?;
        self.mv.expect_shape("LoftAdamState mV", n, r)?;
        self.pu.expect_shape("LoftAdamState pU", m, r * r)?;
        self.pv.expect_shape("LoftAdamState pV", n, r * r)?;
        Ok(())
    }
}

/// Calibration matrices transporting state from the previous iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPair {
    /// `(V_prevᵀ V)(VᵀV)⁻¹`, applied to `U`-side buffers.
    pub cv: DenseMatrix,
    /// `(U_prevᵀ U)(UᵀU)⁻¹`, applied to `V`-side buffers.
    pub cu: DenseMatrix,
}

impl CalibrationPair {
    pub fn identity(r: usize) -> Self {
        CalibrationPair {
            cv: DenseMatrix::identity(r),
            cu: DenseMatrix::identity(r),
        }
    }
}

pub fn calibration_matrices(adapter: &LowRankAdapter) -> CalibrationPair {
    calibration_with(adapter, &adapter.grams())
}

pub(crate) fn calibration_with(adapter: &LowRankAdapter, grams: &FactorGrams) -> CalibrationPair {
    CalibrationPair {
        cv: calibration(adapter.v_prev(), adapter.v(), &grams.vtv_inv),
        cu: calibration(adapter.u_prev(), adapter.u(), &grams.utu_inv),
    }
}

/// `(PᵀM)(MᵀM)⁺` written as `(MᵀM)(MᵀM)⁺ + (P − M)ᵀ M (MᵀM)⁺`: exactly the
/// identity when the factor did not move, and otherwise only the small
/// correction term carries the conditioning of `M`.
fn calibration(prev: &DenseMatrix, cur: &DenseMatrix, gi: &GramInverse) -> DenseMatrix {
    if prev == cur {
        return gi.range.clone();
    }
    gi.range.add(&prev.sub(cur).t_matmul(cur).matmul(&gi.inverse))
}

/// `m ← decay·m·C + gain·g`, with `C = I` when `calibrate` is false.
pub(crate) fn calibrated_ema(
    m: &mut DenseMatrix,
    c: &DenseMatrix,
    calibrate: bool,
    decay: f64,
    gain: f64,
    g: &DenseMatrix,
) {
    if calibrate {
        let mut moved = m.matmul(c);
        moved.blend_assign(decay, gain, g);
        *m = moved;
    } else {
        m.blend_assign(decay, gain, g);
    }
}

/// First-moment update for both factors:
/// `mᵁ ← β₁ mᵁ Cⱽ + (1−β₁) g̃U` and the mirror for `V`.
pub fn update_first_moments(
    state: &mut LoftAdamState,
    calib: &CalibrationPair,
    grads: &ScaledGrads,
    beta1: f64,
    flags: &AblationFlags,
) {
    let on = flags.first_moment_calibration;
    calibrated_ema(&mut state.mu, &calib.cv, on, beta1, 1.0 - beta1, &grads.gu);
    calibrated_ema(&mut state.mv, &calib.cu, on, beta1, 1.0 - beta1, &grads.gv);
}

/// Cross-term update for both factors:
/// `pᵁ ← β₂ pᵁ (Cⱽ ⊗ Cⱽ) + (1−β₂)(g̃U • g̃U)` and the mirror for `V`.
pub fn update_cross_terms(
    state: &mut LoftAdamState,
    calib: &CalibrationPair,
    grads: &ScaledGrads,
    beta2: f64,
    flags: &AblationFlags,
) {
    let on = flags.second_moment_calibration;
    let fresh_u = face_split_unchecked(&grads.gu, &grads.gu);
    let fresh_v = face_split_unchecked(&grads.gv, &grads.gv);
    let kv = if on { kron(&calib.cv, &calib.cv) } else { DenseMatrix::zeros(0, 0) };
    let ku = if on { kron(&calib.cu, &calib.cu) } else { DenseMatrix::zeros(0, 0) };
    calibrated_ema(&mut state.pu, &kv, on, beta2, 1.0 - beta2, &fresh_u);
    calibrated_ema(&mut state.pv, &ku, on, beta2, 1.0 - beta2, &fresh_v);
}

/// Full-space first moment `mᵁ Vᵀ`.
pub fn reconstruct_first_moment(mu: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    if mu.cols() != v.cols() {
        return Err(LoftError::shape(
            "reconstruct_first_moment",
            format!("{} columns in V", mu.cols()),
            v.shape_str(),
        ));
    }
    Ok(mu.matmul_t(v))
}

/// Full-space second moment `pᵁ (Vᵀ ∗ Vᵀ)`:
/// `out[i, j] = Σ_{a,b} pᵁ[i, a·r+b]·V[j,a]·V[j,b]`.
pub fn reconstruct_second_moment(pu: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    let r = v.cols();
    if pu.cols() != r * r {
        return Err(LoftError::shape(
            "reconstruct_second_moment",
            format!("{} columns in pU for rank {r}", r * r),
            pu.shape_str(),
        ));
    }
    Ok(pu.matmul(&row_square_khatri_rao(v)))
}
