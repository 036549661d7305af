//! Built-in verification suite: seeded property checks of every identity
//! the optimizers rely on, each compared against a brute-force oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::adapter::{effective_weight, factor_grads, init_adapter_with, scaled_grads, AdapterInit, LowRankAdapter};
use crate::clip::{clip_scale, effective_global_norm, LayerGradView};
use crate::config::{AblationFlags, OptimizerConfig};
use crate::error::{LoftError, Result};
use crate::harness::presets::preset;
use crate::harness::run::{run_experiment, trajectory_csv};
use crate::linalg::{
    face_split_rows, gram_inverse, khatri_rao_cols, kron, lowrank_fro_norm, projector, DenseMatrix,
};
use crate::loft_state::{
    calibration_matrices, reconstruct_second_moment, update_cross_terms, update_first_moments, LoftAdamState,
};
use crate::muon::{newton_schulz5, newton_schulz5_lowrank, NewtonSchulzParams};
use crate::optim::{
    adamw_full_step, gd_momentum_full_step, loft_adamw_step, loft_gd_momentum_step, loft_gd_step, ActiveFactor,
    FullAdamState, MomentumState,
};
use crate::problems::{gen_rank_r_target, mf_loss_grad, subspace_init, LossConvention, MatrixTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
        }
    }
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub status: CheckStatus,
    pub max_residual: f64,
    pub tolerance: f64,
}

/// Knobs for running the suite against a modified optimizer. The ablation
/// flags are applied wherever a check exercises the moment recursions, so
/// a check that relies on calibration fails when it is switched off.
#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub flags: AblationFlags,
}

struct Check {
    name: &'static str,
    tolerance: f64,
    run: fn(&VerifyOptions) -> Result<f64>,
}

const CHECKS: &[Check] = &[
    Check { name: "linalg.gram_inverse_vs_elimination", tolerance: 1e-9, run: gram_inverse_vs_elimination },
    Check { name: "linalg.projector_properties", tolerance: 1e-10, run: projector_properties },
    Check { name: "linalg.kron_mixed_product", tolerance: 1e-10, run: kron_mixed_product },
    Check { name: "linalg.face_split_hadamard_identity", tolerance: 1e-10, run: face_split_hadamard_identity },
    Check { name: "linalg.face_split_kron_identity", tolerance: 1e-10, run: face_split_kron_identity },
    Check { name: "linalg.lowrank_fro_norm", tolerance: 1e-10, run: lowrank_norm },
    Check { name: "adapter.scale_invariance", tolerance: 1e-9, run: adapter_scale_invariance },
    Check { name: "adapter.smoothness_constant_one", tolerance: 1e-10, run: smoothness_constant_one },
    Check { name: "problems.finite_difference_gradients", tolerance: 1e-5, run: finite_difference_gradients },
    Check { name: "state.first_moment_moving_subspace", tolerance: 1e-9, run: first_moment_moving_subspace },
    Check { name: "state.second_moment_moving_subspace", tolerance: 1e-8, run: second_moment_moving_subspace },
    Check { name: "optim.lemma1_momentum_recovery", tolerance: 1e-8, run: lemma1_momentum_recovery },
    Check { name: "optim.lemma2_alternating_least_squares", tolerance: 1e-8, run: lemma2_als },
    Check { name: "optim.one_step_optimality", tolerance: 1e-10, run: one_step_optimality },
    Check { name: "optim.full_rank_recovery", tolerance: 1e-5, run: full_rank_recovery },
    Check { name: "optim.alternation_and_update_subspace", tolerance: 1e-10, run: alternation_and_subspace },
    Check { name: "optim.rebalance_invariance", tolerance: 1e-8, run: rebalance_invariance },
    Check { name: "optim.weight_decay_semantics", tolerance: 1e-14, run: weight_decay_semantics },
    Check { name: "muon.lowrank_newton_schulz", tolerance: 1e-8, run: lowrank_newton_schulz },
    Check { name: "clip.effective_norm", tolerance: 1e-10, run: clip_effective_norm },
    Check { name: "clip.threshold_after_scaling", tolerance: 1e-12, run: clip_threshold },
    Check { name: "harness.determinism", tolerance: 0.0, run: harness_determinism },
];

/// Names of all registered checks, in execution order.
pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|c| c.name)
}

pub fn verify_suite(filter: Option<&str>) -> Result<Vec<CheckReport>> {
    verify_suite_with(filter, &VerifyOptions::default())
}

/// Run every check whose name matches `filter` (a regex).
pub fn verify_suite_with(filter: Option<&str>, opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    let re = filter
        .map(Regex::new)
        .transpose()
        .map_err(|e| LoftError::config("filter", e.to_string()))?;
    let mut out = Vec::new();
    for c in CHECKS.iter().filter(|c| re.as_ref().is_none_or(|r| r.is_match(c.name))) {
        let residual = match (c.run)(opts) {
            Ok(r) if r.is_nan() => f64::INFINITY,
            Ok(r) => r,
            Err(_) => f64::INFINITY,
        };
        out.push(CheckReport {
            check: c.name.to_string(),
            status: if residual <= c.tolerance { CheckStatus::Pass } else { CheckStatus::Fail },
            max_residual: residual,
            tolerance: c.tolerance,
        });
    }
    Ok(out)
}

// ---- helpers -------------------------------------------------------------

/// Running maximum that treats NaN as the worst possible value.
#[derive(Default)]
struct Worst(f64);

impl Worst {
    fn add(&mut self, r: f64) {
        self.0 = if r.is_nan() { f64::INFINITY } else { self.0.max(r) };
    }
}

fn rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.dist(b) / b.fro_norm().max(1.0)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::gaussian(rows, cols, 1.0, r)
}

/// Gauss–Jordan inverse with partial pivoting.
fn gj_inverse(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = DenseMatrix::identity(n);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .expect("non-empty");
        for j in 0..n {
            let (t, s) = (m[(col, j)], inv[(col, j)]);
            m[(col, j)] = m[(piv, j)];
            m[(piv, j)] = t;
            inv[(col, j)] = inv[(piv, j)];
            inv[(piv, j)] = s;
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in (0..n).filter(|&i| i != col) {
            let f = m[(i, col)];
            if f != 0.0 {
                for j in 0..n {
                    m[(i, j)] -= f * m[(col, j)];
                    inv[(i, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}

/// `M (MᵀM)⁻¹ Mᵀ` through elimination, independent of the SVD path.
fn gj_projector(m: &DenseMatrix) -> DenseMatrix {
    m.matmul(&gj_inverse(&m.t_matmul(m))).matmul_t(m)
}

fn random_adapter(r: &mut ChaCha8Rng, m: usize, n: usize, rank: usize) -> LowRankAdapter {
    let u = gauss(r, m, rank);
    let v = gauss(r, n, rank);
    LowRankAdapter::from_factors(DenseMatrix::zeros(m, n), u, v).expect("shapes agree")
}

fn half_grad(adapter: &LowRankAdapter, target: &MatrixTarget) -> Result<(f64, DenseMatrix)> {
    mf_loss_grad(&effective_weight(adapter), target, LossConvention::Half)
}

// ---- linalg --------------------------------------------------------------

fn gram_inverse_vs_elimination(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(101);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let k = r.random_range(1..=5);
        let p = r.random_range(k..=12);
        let m = gauss(&mut r, p, k);
        let oracle = gj_inverse(&m.t_matmul(&m));
        worst.add(gram_inverse(&m).inverse.dist(&oracle) / oracle.fro_norm());
    }
    Ok(worst.0)
}

fn projector_properties(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(102);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let k = r.random_range(1..=4);
        let p = r.random_range(k..=10);
        let m = gauss(&mut r, p, k);
        let p = projector(&m);
        worst.add(p.dist(&p.transpose()));
        worst.add(p.matmul(&p).dist(&p));
        worst.add(rel(&p.matmul(&m), &m));
        worst.add(rel(&p, &gj_projector(&m)));
    }
    Ok(worst.0)
}

fn kron_mixed_product(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(103);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let d: Vec<usize> = (0..6).map(|_| r.random_range(1..=4)).collect();
        let (a, b) = (gauss(&mut r, d[0], d[1]), gauss(&mut r, d[2], d[3]));
        let (c, e) = (gauss(&mut r, d[1], d[4]), gauss(&mut r, d[3], d[5]));
        let rhs = kron(&a.matmul(&c), &b.matmul(&e));
        worst.add(rel(&kron(&a, &b).matmul(&kron(&c, &e)), &rhs));
    }
    Ok(worst.0)
}

/// `(A • C)(B ∗ D) = (AB) ⊙ (CD)`.
fn face_split_hadamard_identity(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(104);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let (p, k, q) = (r.random_range(1..=7), r.random_range(1..=4), r.random_range(1..=7));
        let (a, c) = (gauss(&mut r, p, k), gauss(&mut r, p, k));
        let (b, d) = (gauss(&mut r, k, q), gauss(&mut r, k, q));
        let lhs = face_split_rows(&a, &c)?.matmul(&khatri_rao_cols(&b, &d)?);
        worst.add(rel(&lhs, &a.matmul(&b).hadamard(&c.matmul(&d))));
    }
    Ok(worst.0)
}

/// `(A • B)(C ⊗ D) = (AC) • (BD)`.
fn face_split_kron_identity(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(105);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let p = r.random_range(1..=6);
        let d: Vec<usize> = (0..4).map(|_| r.random_range(1..=3)).collect();
        let (a, b) = (gauss(&mut r, p, d[0]), gauss(&mut r, p, d[1]));
        let (c, e) = (gauss(&mut r, d[0], d[2]), gauss(&mut r, d[1], d[3]));
        let lhs = face_split_rows(&a, &b)?.matmul(&kron(&c, &e));
        worst.add(rel(&lhs, &face_split_rows(&a.matmul(&c), &b.matmul(&e))?));
    }
    Ok(worst.0)
}

fn lowrank_norm(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(106);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let k = r.random_range(1..=8);
        let (m, n) = (r.random_range(1..=64), r.random_range(1..=64));
        let (u, v) = (gauss(&mut r, m, k), gauss(&mut r, n, k));
        let dense = u.matmul_t(&v).fro_norm();
        worst.add((lowrank_fro_norm(&u, &v)? - dense).abs() / dense);
    }
    Ok(worst.0)
}

// ---- adapter -------------------------------------------------------------

fn adapter_scale_invariance(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(107);
    let mut worst = Worst::default();
    for _ in 0..10 {
        let (m, n, k) = (r.random_range(3..=10), r.random_range(3..=10), r.random_range(1..=3));
        let base = random_adapter(&mut r, m, n, k);
        let gw = gauss(&mut r, m, n);
        let products = |a: &LowRankAdapter| -> Result<[DenseMatrix; 3]> {
            let g = factor_grads(&gw, a)?;
            let s = scaled_grads(&g.gu, &g.gv, a)?;
            Ok([effective_weight(a), s.gu.matmul_t(a.v()), s.gv.matmul_t(a.u())])
        };
        let reference = products(&base)?;
        for c in [0.5, 2.0, 10.0] {
            let mut a = base.clone();
            a.rebalance(c);
            for (x, y) in products(&a)?.iter().zip(&reference) {
                worst.add(rel(x, y));
            }
        }
    }
    Ok(worst.0)
}

/// With `V` fixed, the scaled gradient is `U − A V (VᵀV)⁻¹` under the half
/// convention, so differences in `U` pass through unchanged.
fn smoothness_constant_one(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(108);
    let mut worst = Worst::default();
    for i in 0..50 {
        let (m, n, k) = (r.random_range(3..=10), r.random_range(3..=10), r.random_range(1..=3));
        let target = gen_rank_r_target(m, n, r.random_range(1..=m.min(n)), 500 + i)?;
        let v = gauss(&mut r, n, k);
        let scaled = |u: DenseMatrix| -> Result<DenseMatrix> {
            let a = LowRankAdapter::from_factors(DenseMatrix::zeros(m, n), u, v.clone())?;
            let (_, gw) = half_grad(&a, &target)?;
            let g = factor_grads(&gw, &a)?;
            Ok(scaled_grads(&g.gu, &g.gv, &a)?.gu)
        };
        let (u1, u2) = (gauss(&mut r, m, k), gauss(&mut r, m, k));
        let lhs = scaled(u1.clone())?.dist(&scaled(u2.clone())?);
        let rhs = u1.dist(&u2);
        worst.add((lhs - rhs).abs() / rhs);
    }
    Ok(worst.0)
}

// ---- problems ------------------------------------------------------------

fn finite_difference_gradients(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(109);
    let mut worst = Worst::default();
    let h = 1e-5;
    for i in 0..20 {
        let (m, n) = (r.random_range(2..=6), r.random_range(2..=6));
        let target = gen_rank_r_target(m, n, r.random_range(1..=m.min(n)), 900 + i)?;
        let conv = if i % 2 == 0 { LossConvention::Full } else { LossConvention::Half };
        let w = gauss(&mut r, m, n);
        let (_, g) = mf_loss_grad(&w, &target, conv)?;
        let fd = DenseMatrix::from_fn(m, n, |a, b| {
            let bump = |s: f64| {
                let mut x = w.clone();
                x[(a, b)] += s;
                mf_loss_grad(&x, &target, conv).expect("shape").0
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        });
        worst.add(fd.dist(&g) / g.fro_norm());

        // The factor gradients are the chain rule through W = UVᵀ.
        let k = r.random_range(1..=3);
        let a = random_adapter(&mut r, m, n, k);
        let (_, gw) = mf_loss_grad(&effective_weight(&a), &target, conv)?;
        let fg = factor_grads(&gw, &a)?;
        let f_of = |u: &DenseMatrix, v: &DenseMatrix| mf_loss_grad(&u.matmul_t(v), &target, conv).expect("shape").0;
        let fd_u = DenseMatrix::from_fn(m, k, |p, q| {
            let (mut up, mut dn) = (a.u().clone(), a.u().clone());
            up[(p, q)] += h;
            dn[(p, q)] -= h;
            (f_of(&up, a.v()) - f_of(&dn, a.v())) / (2.0 * h)
        });
        let fd_v = DenseMatrix::from_fn(n, k, |p, q| {
            let (mut up, mut dn) = (a.v().clone(), a.v().clone());
            up[(p, q)] += h;
            dn[(p, q)] -= h;
            (f_of(a.u(), &up) - f_of(a.u(), &dn)) / (2.0 * h)
        });
        worst.add(fd_u.dist(&fg.gu) / fg.gu.fro_norm());
        worst.add(fd_v.dist(&fg.gv) / fg.gv.fro_norm());
    }
    Ok(worst.0)
}

// ---- moment recursions ---------------------------------------------------

/// A random factor path with one dense gradient per step.
struct MovingPath {
    adapter: LowRankAdapter,
    state: LoftAdamState,
    grads: Vec<DenseMatrix>,
    proj_v: Vec<DenseMatrix>,
    proj_u: Vec<DenseMatrix>,
}

impl MovingPath {
    fn new(r: &mut ChaCha8Rng) -> Self {
        let (m, n, k) = (r.random_range(4..=10), r.random_range(4..=10), r.random_range(1..=3));
        let adapter = random_adapter(r, m, n, k);
        let state = LoftAdamState::new(&adapter, crate::config::FirstFactor::U);
        MovingPath { adapter, state, grads: vec![], proj_v: vec![], proj_u: vec![] }
    }

    /// Perturb both factors, draw a gradient, and return the scaled grads
    /// and calibration for the new point.
    fn advance(
        &mut self,
        r: &mut ChaCha8Rng,
    ) -> Result<(crate::loft_state::CalibrationPair, crate::adapter::ScaledGrads)> {
        let (m, n) = self.adapter.shape();
        let k = self.adapter.rank();
        let u = self.adapter.u().add(&gauss(r, m, k).scale(0.3));
        let v = self.adapter.v().add(&gauss(r, n, k).scale(0.3));
        self.adapter.advance_to(u, v)?;
        let g = gauss(r, m, n);
        let fg = factor_grads(&g, &self.adapter)?;
        let sg = scaled_grads(&fg.gu, &fg.gv, &self.adapter)?;
        self.proj_v.push(gj_projector(self.adapter.v()));
        self.proj_u.push(gj_projector(self.adapter.u()));
        self.grads.push(g);
        Ok((calibration_matrices(&self.adapter), sg))
    }

    /// `g_i Π_{j≥i} 𝒫_{V_j}` (or the `U`-side mirror on `g_iᵀ`) for every `i`.
    fn transported(&self, u_side: bool) -> Vec<DenseMatrix> {
        (0..self.grads.len())
            .map(|i| {
                let (mut x, projs) = if u_side {
                    (self.grads[i].transpose(), &self.proj_u)
                } else {
                    (self.grads[i].clone(), &self.proj_v)
                };
                for p in &projs[i..] {
                    x = x.matmul(p);
                }
                x
            })
            .collect()
    }
}

/// `(1−β) Σ_i β^{k−i} f(x_i)`.
fn ema_oracle(xs: &[DenseMatrix], beta: f64, f: impl Fn(&DenseMatrix) -> DenseMatrix) -> DenseMatrix {
    let k = xs.len();
    let mut acc = DenseMatrix::zeros(xs[0].rows(), xs[0].cols());
    for (i, x) in xs.iter().enumerate() {
        acc = acc.add(&f(x).scale((1.0 - beta) * beta.powi((k - 1 - i) as i32)));
    }
    acc
}

fn first_moment_moving_subspace(opts: &VerifyOptions) -> Result<f64> {
    let mut r = rng(110);
    let beta = 0.8;
    let mut worst = Worst::default();
    for _ in 0..20 {
        let mut path = MovingPath::new(&mut r);
        for _ in 0..6 {
            let (calib, sg) = path.advance(&mut r)?;
            update_first_moments(&mut path.state, &calib, &sg, beta, &opts.flags);
            let want_u = ema_oracle(&path.transported(false), beta, |x| x.clone());
            let want_v = ema_oracle(&path.transported(true), beta, |x| x.clone());
            worst.add(rel(&path.state.mu.matmul_t(path.adapter.v()), &want_u));
            worst.add(rel(&path.state.mv.matmul_t(path.adapter.u()), &want_v));
        }
    }
    Ok(worst.0)
}

fn second_moment_moving_subspace(opts: &VerifyOptions) -> Result<f64> {
    let mut r = rng(111);
    let beta = 0.9;
    let mut worst = Worst::default();
    for _ in 0..20 {
        let mut path = MovingPath::new(&mut r);
        for _ in 0..6 {
            let (calib, sg) = path.advance(&mut r)?;
            update_cross_terms(&mut path.state, &calib, &sg, beta, &opts.flags);
            let want_u = ema_oracle(&path.transported(false), beta, |x| x.hadamard(x));
            let want_v = ema_oracle(&path.transported(true), beta, |x| x.hadamard(x));
            worst.add(rel(&reconstruct_second_moment(&path.state.pu, path.adapter.v())?, &want_u));
            worst.add(rel(&reconstruct_second_moment(&path.state.pv, path.adapter.u())?, &want_v));
        }
    }
    Ok(worst.0)
}

// ---- optimizer-level properties ------------------------------------------

fn lemma1_momentum_recovery(opts: &VerifyOptions) -> Result<f64> {
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 0.05, beta1: 0.9, flags: opts.flags, ..Default::default() };
    for seed in 0..10 {
        let target = gen_rank_r_target(10, 8, 3, seed)?;
        let (u, v) = subspace_init(&target, 3, seed + 100)?;
        let mut a = LowRankAdapter::from_factors(DenseMatrix::zeros(10, 8), u, v)?;
        let mut st = LoftAdamState::new(&a, cfg.first_factor);
        let mut w = effective_weight(&a);
        let mut ms = MomentumState::new(10, 8);
        for _ in 0..50 {
            let (_, g) = half_grad(&a, &target)?;
            loft_gd_momentum_step(&mut a, &g, &mut st, &cfg)?;
            let (_, g) = mf_loss_grad(&w, &target, LossConvention::Half)?;
            gd_momentum_full_step(&mut w, &g, &mut ms, &cfg)?;
            worst.add(rel(&effective_weight(&a), &w));
        }
    }
    Ok(worst.0)
}

/// LoFT-GD with η = 1 solves the least-squares problem in the stepped factor.
fn lemma2_als(opts: &VerifyOptions) -> Result<f64> {
    let mut r = rng(112);
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 1.0, flags: AblationFlags { alternating: true, ..opts.flags }, ..Default::default() };
    for i in 0..20 {
        let (m, n, k) = (r.random_range(3..=12), r.random_range(3..=12), r.random_range(1..=3));
        // r_A ≥ r keeps each least-squares solution full rank.
        let target = gen_rank_r_target(m, n, r.random_range(k..=m.min(n)), 700 + i)?;
        let mut a = init_adapter_with(m, n, k, 800 + i, DenseMatrix::zeros(m, n), AdapterInit::Gaussian)?;
        let mut alt = crate::loft_state::Alternation::new(cfg.first_factor);
        for _ in 0..10 {
            let (_, g) = half_grad(&a, &target)?;
            let u_step = alt.update_u_next;
            let best = if u_step {
                let u = target.a.matmul(a.v()).matmul(&gj_inverse(&a.v().t_matmul(a.v())));
                0.5 * u.matmul_t(a.v()).sub(&target.a).fro_norm_sq()
            } else {
                let v = target.a.t_matmul(a.u()).matmul(&gj_inverse(&a.u().t_matmul(a.u())));
                0.5 * a.u().matmul_t(&v).sub(&target.a).fro_norm_sq()
            };
            loft_gd_step(&mut a, &g, &mut alt, &cfg)?;
            worst.add((half_grad(&a, &target)?.0 - best).abs());
        }
    }
    Ok(worst.0)
}

fn one_step_optimality(opts: &VerifyOptions) -> Result<f64> {
    let mut r = rng(113);
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 1.0, flags: AblationFlags { alternating: true, ..opts.flags }, ..Default::default() };
    for i in 0..20 {
        let (m, n, k) = (r.random_range(6..=12), r.random_range(6..=12), r.random_range(1..=3));
        let target = gen_rank_r_target(m, n, k + r.random_range(1..=3), 300 + i)?;
        let (u, v) = subspace_init(&target, k, 400 + i)?;
        let mut a = LowRankAdapter::from_factors(DenseMatrix::zeros(m, n), u, v)?;
        let mut alt = crate::loft_state::Alternation::new(cfg.first_factor);
        for _ in 0..2 {
            let (_, g) = half_grad(&a, &target)?;
            loft_gd_step(&mut a, &g, &mut alt, &cfg)?;
        }
        let opt = target.rank_r_optimum(k, LossConvention::Half);
        worst.add((half_grad(&a, &target)?.0 - opt).abs() / opt.max(1.0));
    }
    Ok(worst.0)
}

fn full_rank_recovery(opts: &VerifyOptions) -> Result<f64> {
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 1e-2, flags: opts.flags, ..Default::default() };
    for seed in 0..5 {
        let target = gen_rank_r_target(8, 8, 8, seed)?;
        let mut a = init_adapter_with(8, 8, 8, seed + 100, DenseMatrix::zeros(8, 8), AdapterInit::Gaussian)?;
        let mut st = LoftAdamState::new(&a, cfg.first_factor);
        let mut w = effective_weight(&a);
        let mut fs = FullAdamState::new(8, 8);
        for _ in 0..100 {
            let (_, g) = mf_loss_grad(&effective_weight(&a), &target, LossConvention::Full)?;
            loft_adamw_step(&mut a, &g, &mut st, &cfg)?;
            let (_, g) = mf_loss_grad(&w, &target, LossConvention::Full)?;
            adamw_full_step(&mut w, &g, &mut fs, &cfg)?;
            worst.add(rel(&effective_weight(&a), &w));
        }
    }
    Ok(worst.0)
}

/// Exactly one factor moves per alternating step, and the change in `W`
/// lies in the row space of `V` (U-steps) or column space of `U` (V-steps).
fn alternation_and_subspace(opts: &VerifyOptions) -> Result<f64> {
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 0.05, flags: AblationFlags { alternating: true, ..opts.flags }, ..Default::default() };
    for seed in 0..10 {
        let target = gen_rank_r_target(9, 7, 3, seed)?;
        let mut a = init_adapter_with(9, 7, 2, seed + 50, DenseMatrix::zeros(9, 7), AdapterInit::Gaussian)?;
        let mut st = LoftAdamState::new(&a, cfg.first_factor);
        for _ in 0..8 {
            let before = a.clone();
            let (_, g) = mf_loss_grad(&effective_weight(&a), &target, LossConvention::Full)?;
            let rep = loft_adamw_step(&mut a, &g, &mut st, &cfg)?;
            let dw = effective_weight(&a).sub(&effective_weight(&before));
            let scale = dw.fro_norm().max(f64::MIN_POSITIVE);
            match rep.active {
                ActiveFactor::U => {
                    worst.add(if a.v() == before.v() { 0.0 } else { 1.0 });
                    worst.add(dw.sub(&dw.matmul(&gj_projector(a.v()))).fro_norm() / scale);
                }
                ActiveFactor::V => {
                    worst.add(if a.u() == before.u() { 0.0 } else { 1.0 });
                    worst.add(dw.sub(&gj_projector(a.u()).matmul(&dw)).fro_norm() / scale);
                }
                _ => worst.add(1.0),
            }
        }
    }
    Ok(worst.0)
}

/// Rebalancing `(U, V) → (cU, V/c)` mid-run leaves the `W` trajectory
/// unchanged: the calibration matrices transport the moment state.
fn rebalance_invariance(opts: &VerifyOptions) -> Result<f64> {
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 0.02, flags: opts.flags, ..Default::default() };
    for seed in 0..5 {
        let target = gen_rank_r_target(10, 6, 3, seed)?;
        let mut a = init_adapter_with(10, 6, 3, seed + 10, DenseMatrix::zeros(10, 6), AdapterInit::Gaussian)?;
        let mut st = LoftAdamState::new(&a, cfg.first_factor);
        for _ in 0..3 {
            let (_, g) = mf_loss_grad(&effective_weight(&a), &target, LossConvention::Full)?;
            loft_adamw_step(&mut a, &g, &mut st, &cfg)?;
        }
        for c in [0.3, 3.0] {
            let (mut a1, mut s1) = (a.clone(), st.clone());
            let (mut a2, mut s2) = (a.clone(), st.clone());
            a2.rebalance(c);
            for _ in 0..4 {
                let (_, g1) = mf_loss_grad(&effective_weight(&a1), &target, LossConvention::Full)?;
                let (_, g2) = mf_loss_grad(&effective_weight(&a2), &target, LossConvention::Full)?;
                loft_adamw_step(&mut a1, &g1, &mut s1, &cfg)?;
                loft_adamw_step(&mut a2, &g2, &mut s2, &cfg)?;
                worst.add(rel(&effective_weight(&a2), &effective_weight(&a1)));
            }
        }
    }
    Ok(worst.0)
}

fn weight_decay_semantics(opts: &VerifyOptions) -> Result<f64> {
    let mut r = rng(114);
    let mut worst = Worst::default();
    let cfg = OptimizerConfig { eta: 0.5, weight_decay: 0.1, flags: opts.flags, ..Default::default() };
    for _ in 0..5 {
        let mut a = random_adapter(&mut r, 6, 5, 2);
        let mut st = LoftAdamState::new(&a, cfg.first_factor);
        let zero = DenseMatrix::zeros(6, 5);
        for _ in 0..2 {
            let before = a.delta();
            loft_adamw_step(&mut a, &zero, &mut st, &cfg)?;
            let want = before.scale(1.0 - cfg.weight_decay * cfg.eta);
            worst.add(a.delta().dist(&want) / want.fro_norm());
        }
    }
    Ok(worst.0)
}

// ---- muon ----------------------------------------------------------------

fn lowrank_newton_schulz(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(115);
    let params = NewtonSchulzParams::default();
    let mut worst = Worst::default();
    for i in 0..50 {
        let k = r.random_range(1..=4);
        let (mut m, mut n) = (r.random_range(k..=16), r.random_range(k..=16));
        // Alternate which side is taller so both branches are exercised.
        if (i % 2 == 0) != (m > n) {
            std::mem::swap(&mut m, &mut n);
        }
        if m == n {
            m += 1;
        }
        let (u, v) = (gauss(&mut r, m, k), gauss(&mut r, n, k));
        let dense = newton_schulz5(&u.matmul_t(&v), &params);
        let low = newton_schulz5_lowrank(&u, &v, &params)?;
        worst.add(low.x_u.matmul_t(&v).dist(&dense) / dense.fro_norm());
    }
    Ok(worst.0)
}

// ---- clipping ------------------------------------------------------------

fn clip_effective_norm(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(116);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let layers: Vec<(LowRankAdapter, DenseMatrix)> = (0..r.random_range(1..=3))
            .map(|_| {
                let (m, n) = (r.random_range(3..=9), r.random_range(3..=9));
                let k = r.random_range(1..=m.min(n));
                (random_adapter(&mut r, m, n, k), gauss(&mut r, m, n))
            })
            .collect();
        let scaled: Vec<_> = layers
            .iter()
            .map(|(a, g)| {
                let fg = factor_grads(g, a)?;
                scaled_grads(&fg.gu, &fg.gv, a)
            })
            .collect::<Result<_>>()?;
        for u_side in [true, false] {
            let views: Vec<_> = layers
                .iter()
                .zip(&scaled)
                .map(|((a, _), s)| {
                    if u_side {
                        LayerGradView::LowRank { active: &s.gu, inactive: a.v() }
                    } else {
                        LayerGradView::LowRank { active: &s.gv, inactive: a.u() }
                    }
                })
                .collect();
            let dense: f64 = layers
                .iter()
                .map(|(a, g)| {
                    let e = if u_side { g.matmul(&gj_projector(a.v())) } else { gj_projector(a.u()).matmul(g) };
                    e.fro_norm_sq()
                })
                .sum::<f64>()
                .sqrt();
            worst.add((effective_global_norm(&views) - dense).abs() / dense);
        }
    }
    // Full rank: the effective gradient is the dense gradient.
    for _ in 0..10 {
        let n = r.random_range(2..=7);
        let m = r.random_range(n..=9);
        let a = random_adapter(&mut r, m, n, n);
        let g = gauss(&mut r, a.shape().0, n);
        let fg = factor_grads(&g, &a)?;
        let s = scaled_grads(&fg.gu, &fg.gv, &a)?;
        let norm = effective_global_norm(&[LayerGradView::LowRank { active: &s.gu, inactive: a.v() }]);
        worst.add((norm - g.fro_norm()).abs() / g.fro_norm());
    }
    Ok(worst.0)
}

fn clip_threshold(_: &VerifyOptions) -> Result<f64> {
    let mut r = rng(117);
    let mut worst = Worst::default();
    for _ in 0..20 {
        let a = random_adapter(&mut r, 7, 5, 2);
        let g = gauss(&mut r, 7, 5).scale(10.0);
        let fg = factor_grads(&g, &a)?;
        let s = scaled_grads(&fg.gu, &fg.gv, &a)?;
        let norm = effective_global_norm(&[LayerGradView::LowRank { active: &s.gu, inactive: a.v() }]);
        let t = 0.1 * norm;
        let clipped = s.gu.scale(clip_scale(norm, Some(t)));
        let after = effective_global_norm(&[LayerGradView::LowRank { active: &clipped, inactive: a.v() }]);
        worst.add((after - t).abs() / t);
    }
    Ok(worst.0)
}

// ---- harness -------------------------------------------------------------

fn harness_determinism(_: &VerifyOptions) -> Result<f64> {
    let mut worst = Worst::default();
    for cfg in preset("lemma2")?.experiments() {
        let a = trajectory_csv(&run_experiment(&cfg)?.records)?;
        let b = trajectory_csv(&run_experiment(&cfg)?.records)?;
        worst.add(if a == b { 0.0 } else { 1.0 });
    }
    Ok(worst.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elimination_oracle_inverts() {
        let a = DenseMatrix::from_rows(&[[0.0, 2.0], [3.0, 1.0]]).unwrap();
        assert!(gj_inverse(&a).matmul(&a).dist(&DenseMatrix::identity(2)) < 1e-15);
    }

    #[test]
    fn filter_selects_checks_and_rejects_bad_regex() {
        let reports = verify_suite(Some("^linalg\\.kron")).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].status, CheckStatus::Pass);
        assert!(verify_suite(Some("(")).is_err());
    }

    #[test]
    fn disabling_calibration_breaks_the_moving_subspace_checks() {
        let flags = AblationFlags { first_moment_calibration: false, ..Default::default() };
        let r = verify_suite_with(Some("first_moment_moving"), &VerifyOptions { flags }).unwrap();
        assert_eq!(r[0].status, CheckStatus::Fail, "{r:?}");
        assert!(r[0].max_residual > 1e-3);

        let flags = AblationFlags { second_moment_calibration: false, ..Default::default() };
        let r = verify_suite_with(Some("second_moment_moving"), &VerifyOptions { flags }).unwrap();
        assert_eq!(r[0].status, CheckStatus::Fail, "{r:?}");
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = check_names().collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }
}
