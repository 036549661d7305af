//! Muon-family steppers and the Newton–Schulz quintic they orthogonalize with.
//!
//! The low-rank variant never forms `G = U Vᵀ`. Writing the iterate as
//! `X = U X_c Vᵀ`, every power of `XXᵀ` collapses to `r×r` algebra:
//!
//! ```text
//! X Xᵀ X = U (S · UᵀU) X_c Vᵀ,   S = X_c (VᵀV) X_cᵀ
//! ```
//!
//! so one iteration costs `O(r³)` after the two Gram matrices are formed.

use serde::{Deserialize, Serialize};

use crate::adapter::LowRankAdapter;
use crate::clip::{clip_scale, effective_global_norm};
use crate::config::{FirstFactor, OptimizerConfig};
use crate::error::{LoftError, Result};
use crate::linalg::{lowrank_fro_norm_sq_gram, DenseMatrix};
use crate::loft_state::Alternation;
use crate::optim::{
    active_factor, apply_direction, clip_dense, muon_moment_update, prepare_layer, ActiveFactor,
    StepReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSchulzParams {
    pub n_steps: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub eps: f64,
}

impl Default for NewtonSchulzParams {
    fn default() -> Self {
        NewtonSchulzParams {
            n_steps: 5,
            a: 3.4445,
            b: -4.7750,
            c: 2.0315,
            eps: 1e-7,
        }
    }
}

impl NewtonSchulzParams {
    pub fn with_steps(n_steps: usize) -> Self {
        assert!(n_steps >= 1, "Newton-Schulz needs at least one step");
        NewtonSchulzParams {
            n_steps,
            ..Self::default()
        }
    }

    /// `a·x + b·x³ + c·x⁵`, the map each singular value goes through per step.
    pub fn scalar_map(&self, x: f64) -> f64 {
        let x2 = x * x;
        x * (self.a + x2 * (self.b + self.c * x2))
    }

    /// `aI + bA + cA²` applied as `aX + (bA + cA²)X`.
    fn poly_step(&self, x: &DenseMatrix, gram: &DenseMatrix) -> DenseMatrix {
        let b_mat = gram.scale(self.b).add(&gram.matmul(gram).scale(self.c));
        let mut out = b_mat.matmul(x);
        out.blend_assign(1.0, self.a, x);
        out
    }
}

/// Approximate orthogonal polar factor of `G` by the quintic iteration.
pub fn newton_schulz5(g: &DenseMatrix, params: &NewtonSchulzParams) -> DenseMatrix {
    let mut x = g.scale(1.0 / (g.fro_norm() + params.eps));
    let tall = g.rows() > g.cols();
    if tall {
        x = x.transpose();
    }
    for _ in 0..params.n_steps {
        let gram = x.matmul_t(&x);
        x = params.poly_step(&x, &gram);
    }
    if tall {
        x.transpose()
    } else {
        x
    }
}

/// Output of [`newton_schulz5_lowrank`].
#[derive(Debug, Clone)]
pub struct LowRankPolar {
    /// `m×r` partial factor with `x_u · Vᵀ ≈ NewtonSchulz5(U Vᵀ)`.
    pub x_u: DenseMatrix,
    /// The `r×r` core after the final iteration (in flipped coordinates
    /// when `m > n`).
    pub core: DenseMatrix,
}

/// Newton–Schulz on `G = U Vᵀ` carried entirely in the `r×r` core.
pub fn newton_schulz5_lowrank(
    u: &DenseMatrix,
    v: &DenseMatrix,
    params: &NewtonSchulzParams,
) -> Result<LowRankPolar> {
    if u.cols() != v.cols() {
        return Err(LoftError::shape(
            "newton_schulz5_lowrank",
            format!("rank {}", u.cols()),
            format!("rank {}", v.cols()),
        ));
    }
    let flipped = u.rows() > v.rows();
    let (left, right) = if flipped { (v, u) } else { (u, v) };
    let r = u.cols();

    let ltl = left.t_matmul(left);
    let rtr = right.t_matmul(right);
    let norm = lowrank_fro_norm_sq_gram(&ltl, &rtr).sqrt();
    let mut core = DenseMatrix::identity(r).scale(1.0 / (norm + params.eps));
    for _ in 0..params.n_steps {
        let s = core.matmul(&rtr).matmul_t(&core);
        let a_small = s.matmul(&ltl);
        core = params.poly_step(&core, &a_small);
    }
    let x_u = if flipped {
        right.matmul_t(&core)
    } else {
        left.matmul(&core)
    };
    Ok(LowRankPolar { x_u, core })
}

/// Reference Muon momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuonState {
    pub m: DenseMatrix,
    pub step: u64,
}

impl MuonState {
    pub fn new(rows: usize, cols: usize) -> Self {
        MuonState {
            m: DenseMatrix::zeros(rows, cols),
            step: 0,
        }
    }
}

/// LoFT-Muon momenta: only `m×r` and `n×r` buffers, no cross terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoftMuonState {
    pub mu: DenseMatrix,
    pub mv: DenseMatrix,
    pub alternation: Alternation,
}

impl LoftMuonState {
    pub fn new(adapter: &LowRankAdapter, first: FirstFactor) -> Self {
        let (m, n) = adapter.shape();
        let r = adapter.rank();
        LoftMuonState {
            mu: DenseMatrix::zeros(m, r),
            mv: DenseMatrix::zeros(n, r),
            alternation: Alternation::new(first),
        }
    }

    /// Floats held by the optimizer state.
    pub fn state_len(&self) -> usize {
        self.mu.data().len() + self.mv.data().len()
    }
}

/// `m ← μ m + g`, `W ← (1−λη) W − η·NewtonSchulz5(m)`.
pub fn muon_full_step(
    w: &mut DenseMatrix,
    gw: &DenseMatrix,
    state: &mut MuonState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    gw.expect_shape("muon_full_step", w.rows(), w.cols())?;
    state.m.expect_shape("muon_full_step state", w.rows(), w.cols())?;
    gw.expect_finite("gradient")?;
    let (norm, scale) = clip_dense(gw, cfg.clip_threshold);
    state.step += 1;
    state.m.blend_assign(cfg.momentum, scale, gw);
    let o = newton_schulz5(&state.m, &NewtonSchulzParams::with_steps(cfg.ns_steps));
    w.blend_assign(1.0 - cfg.weight_decay * cfg.eta, -cfg.eta, &o);
    Ok(StepReport::new(norm, scale, ActiveFactor::Full))
}

/// LoFT-Muon: calibrated momenta for both factors, low-rank Newton–Schulz
/// on the active one. `U ← (1−λη) U − η·X_U` with `X_U Vᵀ ≈ NS5(mᵁ Vᵀ)`.
pub fn loft_muon_step(
    adapter: &mut LowRankAdapter,
    gw: &DenseMatrix,
    state: &mut LoftMuonState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let (m, n) = adapter.shape();
    let r = adapter.rank();
    state.mu.expect_shape("LoftMuonState mU", m, r)?;
    state.mv.expect_shape("LoftMuonState mV", n, r)?;

    let mut prep = prepare_layer(adapter, gw)?;
    let active = active_factor(&state.alternation, cfg.flags.alternating);
    let norm = effective_global_norm(&[prep.view(adapter, active)]);
    let scale = clip_scale(norm, cfg.clip_threshold);
    prep.grads.scale_by(scale);

    let on = cfg.flags.first_moment_calibration;
    muon_moment_update(&mut state.mu, &prep.calib.cv, on, cfg.momentum, &prep.grads.gu);
    muon_moment_update(&mut state.mv, &prep.calib.cu, on, cfg.momentum, &prep.grads.gv);

    let params = NewtonSchulzParams::with_steps(cfg.ns_steps);
    let (u, v) = (adapter.u().clone(), adapter.v().clone());
    let delta_u = || newton_schulz5_lowrank(&state.mu, &v, &params).map(|p| p.x_u);
    let delta_v = || newton_schulz5_lowrank(&state.mv, &u, &params).map(|p| p.x_u);
    match active {
        ActiveFactor::U => apply_direction(adapter.u_mut(), &delta_u()?, cfg),
        ActiveFactor::V => apply_direction(adapter.v_mut(), &delta_v()?, cfg),
        _ => {
            let (du, dv) = (delta_u()?, delta_v()?);
            apply_direction(adapter.u_mut(), &du, cfg);
            apply_direction(adapter.v_mut(), &dv, cfg);
        }
    }
    state.alternation.advance(cfg.flags.alternating);
    Ok(StepReport::new(norm, scale, active))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{effective_weight, init_adapter_with, AdapterInit};
    use crate::linalg::svd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// The quintic does not converge to exactly 1: after five steps from
    /// `1/√3` the scalar recurrence sits at ≈0.6858, inside the band the
    /// coefficient set oscillates in.
    #[test]
    fn identity_maps_to_scaled_identity_in_oscillation_band() {
        let p = NewtonSchulzParams::default();
        let out = newton_schulz5(&DenseMatrix::identity(3), &p);
        let mut x = 1.0 / (3f64.sqrt() + p.eps);
        for _ in 0..p.n_steps {
            x = p.scalar_map(x);
        }
        assert!(out.dist(&DenseMatrix::identity(3).scale(x)) < 1e-12);
        assert!((x - 0.685_784_9).abs() < 1e-6, "{x}");
        for s in svd(&out).singular_values {
            assert!((0.6..=1.25).contains(&s), "{s}");
        }
    }

    #[test]
    fn diagonal_input_follows_scalar_recurrence() {
        let p = NewtonSchulzParams::default();
        let g = DenseMatrix::from_diag(&[5.0, 0.2]);
        let out = newton_schulz5(&g, &p);
        let norm = g.fro_norm() + p.eps;
        for (i, &d) in [5.0f64, 0.2].iter().enumerate() {
            let mut x = d / norm;
            for _ in 0..p.n_steps {
                x = p.scalar_map(x);
            }
            assert!((out[(i, i)] - x).abs() < 1e-12, "{} vs {x}", out[(i, i)]);
            assert!((0.6..=1.25).contains(&x.abs()), "{x}");
        }
        assert_eq!(out[(0, 1)], 0.0);
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let z = DenseMatrix::zeros(3, 2);
        assert_eq!(newton_schulz5(&z, &NewtonSchulzParams::default()), z);
        let lr = newton_schulz5_lowrank(&DenseMatrix::zeros(3, 1), &DenseMatrix::zeros(2, 1), &NewtonSchulzParams::default()).unwrap();
        assert_eq!(lr.x_u, DenseMatrix::zeros(3, 1));
    }

    #[test]
    fn lowrank_rank_one_unit() {
        let e1 = DenseMatrix::column(&[1.0, 0.0, 0.0]);
        let p = NewtonSchulzParams::default();
        let lr = newton_schulz5_lowrank(&e1, &e1, &p).unwrap();
        let dense = newton_schulz5(&e1.matmul_t(&e1), &p);
        assert!(lr.x_u.matmul_t(&e1).dist(&dense) < 1e-10);
        let mut x = 1.0 / (1.0 + p.eps);
        for _ in 0..p.n_steps {
            x = p.scalar_map(x);
        }
        assert!((lr.core[(0, 0)] - x).abs() < 1e-12);
        assert!((x - 1.0).abs() < 0.35);
    }

    #[test]
    fn lowrank_rejects_rank_mismatch() {
        let p = NewtonSchulzParams::default();
        assert!(newton_schulz5_lowrank(&DenseMatrix::zeros(3, 2), &DenseMatrix::zeros(3, 1), &p).is_err());
    }

    #[test]
    fn full_muon_zero_momentum_and_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let mut w = DenseMatrix::zeros(4, 3);
        let mut st = MuonState::new(4, 3);
        let cfg = OptimizerConfig { eta: 0.1, momentum: 0.0, ..Default::default() };
        muon_full_step(&mut w, &g, &mut st, &cfg).unwrap();
        let expected = newton_schulz5(&g, &NewtonSchulzParams::default()).scale(-0.1);
        assert!(w.dist(&expected) < 1e-15);

        let mut w2 = g.clone();
        let mut st2 = MuonState::new(4, 3);
        muon_full_step(&mut w2, &DenseMatrix::zeros(4, 3), &mut st2, &cfg).unwrap();
        assert_eq!(w2, g);
    }

    #[test]
    fn loft_muon_zero_gradient_is_pure_decay() {
        let mut a = init_adapter_with(5, 4, 2, 3, DenseMatrix::zeros(5, 4), AdapterInit::Gaussian).unwrap();
        let mut st = LoftMuonState::new(&a, FirstFactor::U);
        let before = a.delta();
        let cfg = OptimizerConfig { eta: 0.1, weight_decay: 0.2, ..Default::default() };
        loft_muon_step(&mut a, &DenseMatrix::zeros(5, 4), &mut st, &cfg).unwrap();
        assert!(a.delta().dist(&before.scale(0.98)) < 1e-14);
        // Only the two m×r / n×r momenta are kept.
        assert_eq!(st.state_len(), (5 + 4) * 2);
    }

    #[test]
    fn loft_muon_square_orthonormal_v_matches_dense_muon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = svd(&DenseMatrix::gaussian(4, 4, 1.0, &mut rng)).u;
        let u = DenseMatrix::gaussian(5, 4, 1.0, &mut rng);
        let mut a = LowRankAdapter::from_factors(DenseMatrix::zeros(5, 4), u, q).unwrap();
        let g = DenseMatrix::gaussian(5, 4, 1.0, &mut rng);
        let cfg = OptimizerConfig { eta: 0.05, momentum: 0.0, ..Default::default() };
        let mut w = effective_weight(&a);
        let mut st = LoftMuonState::new(&a, FirstFactor::U);
        loft_muon_step(&mut a, &g, &mut st, &cfg).unwrap();
        let mut ms = MuonState::new(5, 4);
        muon_full_step(&mut w, &g, &mut ms, &cfg).unwrap();
        assert!(effective_weight(&a).dist(&w) < 1e-10);
    }
}
