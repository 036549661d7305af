//! LoFT steppers for the GD/momentum/AdamW family.
//!
//! Every step runs the same front half: factor gradients, calibration
//! matrices against the previous iterate, scaled gradients, optional
//! clipping on the effective gradient. The methods differ only in the
//! factor-space direction they apply to the active factor.

use crate::adapter::{factor_grads, scaled_grads_with, FactorGrams, LowRankAdapter, ScaledGrads};
use crate::clip::{clip_scale, effective_global_norm, LayerGradView};
use crate::config::OptimizerConfig;
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::loft_state::{
    calibrated_ema, calibration_with, reconstruct_second_moment, update_cross_terms,
    update_first_moments, Alternation, CalibrationPair, LoftAdamState,
};
use crate::optim::{ActiveFactor, StepReport};

/// Gradient quantities for one layer at the current iterate.
pub(crate) struct PreparedLayer {
    pub grams: FactorGrams,
    pub calib: CalibrationPair,
    pub grads: ScaledGrads,
}

/// Front half of a LoFT step. Snapshots the adapter's previous iterates
/// after the calibration matrices have been formed.
pub(crate) fn prepare_layer(adapter: &mut LowRankAdapter, gw: &DenseMatrix) -> Result<PreparedLayer> {
    let raw = factor_grads(gw, adapter)?;
    gw.expect_finite("gradient")?;
    adapter.u().expect_finite("adapter factor U")?;
    adapter.v().expect_finite("adapter factor V")?;
    let grams = adapter.grams();
    let calib = calibration_with(adapter, &grams);
    let grads = scaled_grads_with(&raw.gu, &raw.gv, &grams);
    adapter.snapshot();
    Ok(PreparedLayer { grams, calib, grads })
}

impl PreparedLayer {
    /// Effective gradient of the step about to be taken. Simultaneous
    /// updates are measured on the `U` side.
    pub fn view<'a>(&'a self, adapter: &'a LowRankAdapter, active: ActiveFactor) -> LayerGradView<'a> {
        match active {
            ActiveFactor::V => LayerGradView::LowRank {
                active: &self.grads.gv,
                inactive: adapter.u(),
            },
            _ => LayerGradView::LowRank {
                active: &self.grads.gu,
                inactive: adapter.v(),
            },
        }
    }
}

pub(crate) fn active_factor(alt: &Alternation, alternating: bool) -> ActiveFactor {
    match (alternating, alt.update_u_next) {
        (false, _) => ActiveFactor::Both,
        (true, true) => ActiveFactor::U,
        (true, false) => ActiveFactor::V,
    }
}

/// `F ← (1 − λη) F − η·dir`.
pub(crate) fn apply_direction(factor: &mut DenseMatrix, dir: &DenseMatrix, cfg: &OptimizerConfig) {
    factor.blend_assign(1.0 - cfg.weight_decay * cfg.eta, -cfg.eta, dir);
}

/// Apply per-factor directions to whichever factors are active.
fn apply_active(
    adapter: &mut LowRankAdapter,
    active: ActiveFactor,
    cfg: &OptimizerConfig,
    mut dir: impl FnMut(bool) -> DenseMatrix,
) {
    let (du, dv) = match active {
        ActiveFactor::U => (Some(dir(true)), None),
        ActiveFactor::V => (None, Some(dir(false))),
        _ => (Some(dir(true)), Some(dir(false))),
    };
    if let Some(du) = du {
        apply_direction(adapter.u_mut(), &du, cfg);
    }
    if let Some(dv) = dv {
        apply_direction(adapter.v_mut(), &dv, cfg);
    }
}

fn single_layer_clip(prep: &mut PreparedLayer, adapter: &LowRankAdapter, active: ActiveFactor, cfg: &OptimizerConfig) -> (f64, f64) {
    let norm = effective_global_norm(&[prep.view(adapter, active)]);
    let scale = clip_scale(norm, cfg.clip_threshold);
    prep.grads.scale_by(scale);
    (norm, scale)
}

/// LoFT gradient descent: `U ← U − η g̃U`, so that `W ← W − η ∇W 𝒫_V`.
/// The factor stepped alternates between calls.
pub fn loft_gd_step(
    adapter: &mut LowRankAdapter,
    gw: &DenseMatrix,
    alternation: &mut Alternation,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let mut prep = prepare_layer(adapter, gw)?;
    let active = active_factor(alternation, cfg.flags.alternating);
    let (norm, scale) = single_layer_clip(&mut prep, adapter, active, cfg);
    apply_active(adapter, active, cfg, |is_u| {
        if is_u {
            prep.grads.gu.clone()
        } else {
            prep.grads.gv.clone()
        }
    });
    alternation.advance(cfg.flags.alternating);
    Ok(StepReport::new(norm, scale, active))
}

/// LoFT momentum GD: calibrated first moments for both factors, then
/// `ΔU = η (mᵁ Vᵀ) V (VᵀV)⁻¹` on the active factor. Only the first-moment
/// buffers of `state` are used.
pub fn loft_gd_momentum_step(
    adapter: &mut LowRankAdapter,
    gw: &DenseMatrix,
    state: &mut LoftAdamState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    state.check_against(adapter)?;
    let mut prep = prepare_layer(adapter, gw)?;
    let active = active_factor(&state.alternation, cfg.flags.alternating);
    let (norm, scale) = single_layer_clip(&mut prep, adapter, active, cfg);
    update_first_moments(state, &prep.calib, &prep.grads, cfg.beta1, &cfg.flags);

    // (mVᵀ) V (VᵀV)⁻¹ = m · (VᵀV)(VᵀV)⁺, which is m itself for full-rank V;
    // the range projector is taken from the SVD rather than multiplied out.
    let proj_v = &prep.grams.vtv_inv.range;
    let proj_u = &prep.grams.utu_inv.range;
    let (mu, mv) = (&state.mu, &state.mv);
    apply_active(adapter, active, cfg, |is_u| {
        if is_u {
            mu.matmul(proj_v)
        } else {
            mv.matmul(proj_u)
        }
    });
    state.alternation.advance(cfg.flags.alternating);
    Ok(StepReport::new(norm, scale, active))
}

/// One layer for [`loft_adamw_step_layers`].
pub struct LoftLayer<'a> {
    pub adapter: &'a mut LowRankAdapter,
    pub state: &'a mut LoftAdamState,
    pub grad: &'a DenseMatrix,
}

/// Projected full-space Adam direction for one factor.
///
/// For `U`: `m̃ = mᵁVᵀ/(1−β₁ᵏ)`, `ṽ = max(pᵁ(V∗V), 0)/(1−β₂ᵏ)`, and the
/// factor direction is `(m̃ / denom(ṽ)) · V (VᵀV)⁻¹`. Returns the direction
/// and the number of clamped entries.
fn adam_direction(
    moment: &DenseMatrix,
    cross: &DenseMatrix,
    other: &DenseMatrix,
    other_gram_inv: &DenseMatrix,
    k: i32,
    cfg: &OptimizerConfig,
) -> (DenseMatrix, u64) {
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let mut m_full = moment.matmul_t(other);
    let v_full = reconstruct_second_moment(cross, other).expect("state shapes checked");
    let mut clamped = 0;
    for (mi, &vi) in m_full.data_mut().iter_mut().zip(v_full.data()) {
        let vi = if vi < 0.0 {
            clamped += 1;
            0.0
        } else {
            vi
        };
        *mi = (*mi / bc1) / cfg.eps_placement.denom(vi / bc2, cfg.eps);
    }
    (m_full.matmul(other).matmul(other_gram_inv), clamped)
}

/// LoFT-AdamW over several layers sharing one global clipping norm.
pub fn loft_adamw_step_layers(layers: &mut [LoftLayer<'_>], cfg: &OptimizerConfig) -> Result<Vec<StepReport>> {
    let mut prepared = Vec::with_capacity(layers.len());
    for layer in layers.iter_mut() {
        layer.state.check_against(layer.adapter)?;
        let active = active_factor(&layer.state.alternation, cfg.flags.alternating);
        prepared.push((prepare_layer(layer.adapter, layer.grad)?, active));
    }

    let views: Vec<_> = prepared
        .iter()
        .zip(layers.iter())
        .map(|((p, active), l)| p.view(l.adapter, *active))
        .collect();
    let norm = effective_global_norm(&views);
    let scale = clip_scale(norm, cfg.clip_threshold);

    let mut reports = Vec::with_capacity(layers.len());
    for ((mut prep, active), layer) in prepared.into_iter().zip(layers.iter_mut()) {
        prep.grads.scale_by(scale);
        let state = &mut *layer.state;
        update_first_moments(state, &prep.calib, &prep.grads, cfg.beta1, &cfg.flags);
        update_cross_terms(state, &prep.calib, &prep.grads, cfg.beta2, &cfg.flags);

        let k = (state.alternation.step + 1) as i32;
        let mut clamped = 0;
        let adapter = &mut *layer.adapter;
        let (u, v) = (adapter.u().clone(), adapter.v().clone());
        apply_active(adapter, active, cfg, |is_u| {
            let (dir, c) = if is_u {
                adam_direction(&state.mu, &state.pu, &v, &prep.grams.vtv_inv.inverse, k, cfg)
            } else {
                adam_direction(&state.mv, &state.pv, &u, &prep.grams.utu_inv.inverse, k, cfg)
            };
            clamped += c;
            dir
        });
        state.clamp_events += clamped;
        state.alternation.advance(cfg.flags.alternating);
        let mut rep = StepReport::new(norm, scale, active);
        rep.clamped = clamped;
        reports.push(rep);
    }
    Ok(reports)
}

/// LoFT-AdamW with alternating updates on a single layer.
pub fn loft_adamw_step(
    adapter: &mut LowRankAdapter,
    gw: &DenseMatrix,
    state: &mut LoftAdamState,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    let mut layers = [LoftLayer { adapter, state, grad: gw }];
    Ok(loft_adamw_step_layers(&mut layers, cfg)?[0])
}

/// Calibrated heavy-ball update used by LoFT-Muon: `m ← μ m C + g`.
pub(crate) fn muon_moment_update(moment: &mut DenseMatrix, c: &DenseMatrix, calibrate: bool, mu: f64, g: &DenseMatrix) {
    calibrated_ema(moment, c, calibrate, mu, 1.0, g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{effective_weight, init_adapter_with, AdapterInit};
    use crate::config::{AblationFlags, FirstFactor};
    use crate::linalg::projector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_adapter(m: usize, n: usize, r: usize, seed: u64) -> LowRankAdapter {
        init_adapter_with(m, n, r, seed, DenseMatrix::zeros(m, n), AdapterInit::Gaussian).unwrap()
    }

    #[test]
    fn gd_with_identity_v_is_full_gd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let mut a = LowRankAdapter::from_factors(DenseMatrix::zeros(4, 3), u, DenseMatrix::identity(3)).unwrap();
        let g = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let before = effective_weight(&a);
        let cfg = OptimizerConfig { eta: 0.3, ..Default::default() };
        let mut alt = Alternation::new(FirstFactor::U);
        loft_gd_step(&mut a, &g, &mut alt, &cfg).unwrap();
        let diff = effective_weight(&a).sub(&before);
        assert!(diff.dist(&g.scale(-0.3)) < 1e-14);
        assert!(!alt.update_u_next);
    }

    #[test]
    fn alternation_changes_exactly_one_factor() {
        let mut a = gaussian_adapter(6, 5, 2, 2);
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = OptimizerConfig { eta: 0.01, ..Default::default() };
        for k in 0..6 {
            let g = DenseMatrix::gaussian(6, 5, 1.0, &mut rng);
            let (u0, v0) = (a.u().clone(), a.v().clone());
            let rep = loft_adamw_step(&mut a, &g, &mut st, &cfg).unwrap();
            if k % 2 == 0 {
                assert_eq!(rep.active, ActiveFactor::U);
                assert_eq!(a.v(), &v0);
                assert_ne!(a.u(), &u0);
            } else {
                assert_eq!(rep.active, ActiveFactor::V);
                assert_eq!(a.u(), &u0);
                assert_ne!(a.v(), &v0);
            }
            assert_eq!(a.u_prev(), &u0);
            assert_eq!(a.v_prev(), &v0);
        }
        assert_eq!(st.step(), 6);
    }

    #[test]
    fn no_alternation_changes_both() {
        let mut a = gaussian_adapter(4, 4, 2, 5);
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = DenseMatrix::gaussian(4, 4, 1.0, &mut rng);
        let cfg = OptimizerConfig { flags: AblationFlags::no_alternation(), ..Default::default() };
        let (u0, v0) = (a.u().clone(), a.v().clone());
        let rep = loft_adamw_step(&mut a, &g, &mut st, &cfg).unwrap();
        assert_eq!(rep.active, ActiveFactor::Both);
        assert_ne!(a.u(), &u0);
        assert_ne!(a.v(), &v0);
    }

    #[test]
    fn u_step_lies_in_row_space_of_v() {
        let mut a = gaussian_adapter(7, 6, 2, 7);
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = OptimizerConfig { eta: 0.05, ..Default::default() };
        for _ in 0..5 {
            let g = DenseMatrix::gaussian(7, 6, 1.0, &mut rng);
            let before = effective_weight(&a);
            let rep = loft_adamw_step(&mut a, &g, &mut st, &cfg).unwrap();
            let diff = effective_weight(&a).sub(&before);
            let proj = match rep.active {
                ActiveFactor::U => diff.matmul(&projector(a.v())),
                _ => projector(a.u()).matmul(&diff),
            };
            assert!(proj.dist(&diff) < 1e-10);
        }
    }

    #[test]
    fn weight_decay_shrinks_product_when_gradient_vanishes() {
        let mut a = gaussian_adapter(5, 4, 2, 9);
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let cfg = OptimizerConfig { eta: 0.1, weight_decay: 0.3, ..Default::default() };
        let before = a.delta();
        loft_adamw_step(&mut a, &DenseMatrix::zeros(5, 4), &mut st, &cfg).unwrap();
        assert_eq!(a.delta(), a.u().matmul_t(a.v()));
        assert!(a.delta().dist(&before.scale(0.97)) < 1e-14);
    }

    #[test]
    fn momentum_with_zero_beta_matches_gd() {
        let mut a = gaussian_adapter(5, 3, 2, 10);
        let mut b = a.clone();
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let mut alt = Alternation::new(FirstFactor::U);
        let cfg = OptimizerConfig { eta: 0.2, beta1: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let g = DenseMatrix::gaussian(5, 3, 1.0, &mut rng);
            loft_gd_momentum_step(&mut a, &g, &mut st, &cfg).unwrap();
            loft_gd_step(&mut b, &g, &mut alt, &cfg).unwrap();
            assert!(a.u().dist(b.u()) < 1e-13);
            assert!(a.v().dist(b.v()) < 1e-13);
        }
    }

    #[test]
    fn lora_init_first_u_step_is_projected_sign_step() {
        let mut a = init_adapter_with(6, 4, 2, 12, DenseMatrix::zeros(6, 4), AdapterInit::Lora).unwrap();
        let mut st = LoftAdamState::new(&a, FirstFactor::U);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = DenseMatrix::gaussian(6, 4, 1.0, &mut rng);
        let cfg = OptimizerConfig { eta: 0.1, ..Default::default() };
        loft_adamw_step(&mut a, &g, &mut st, &cfg).unwrap();
        // First step: m̂ = g𝒫_V, v̂ = (g𝒫_V)², so ΔW = −η·(g𝒫_V ⊘ (|g𝒫_V| + ε))·𝒫_V.
        let p = projector(a.v());
        let gp = g.matmul(&p);
        let sign = gp.map(|x| x / (x.abs() + cfg.eps));
        let expected = sign.matmul(&p).scale(-cfg.eta);
        assert!(a.delta().dist(&expected) < 1e-12);
        assert_eq!(st.clamp_events, 0);
    }

    #[test]
    fn multi_layer_clipping_uses_global_norm() {
        let mut a1 = gaussian_adapter(4, 3, 2, 20);
        let mut a2 = gaussian_adapter(5, 5, 2, 21);
        let mut s1 = LoftAdamState::new(&a1, FirstFactor::U);
        let mut s2 = LoftAdamState::new(&a2, FirstFactor::U);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g1 = DenseMatrix::gaussian(4, 3, 10.0, &mut rng);
        let g2 = DenseMatrix::gaussian(5, 5, 10.0, &mut rng);
        let n1 = g1.matmul(&projector(a1.v())).fro_norm();
        let n2 = g2.matmul(&projector(a2.v())).fro_norm();
        let cfg = OptimizerConfig { clip_threshold: Some(1.0), ..Default::default() };
        let reps = loft_adamw_step_layers(
            &mut [
                LoftLayer { adapter: &mut a1, state: &mut s1, grad: &g1 },
                LoftLayer { adapter: &mut a2, state: &mut s2, grad: &g2 },
            ],
            &cfg,
        )
        .unwrap();
        let global = (n1 * n1 + n2 * n2).sqrt();
        assert!((reps[0].grad_norm - global).abs() < 1e-10 * global);
        assert!((reps[1].clip_scale - 1.0 / global).abs() < 1e-12);
    }
}
