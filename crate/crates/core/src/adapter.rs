//! The low-rank parameterization `W = W₀ + U Vᵀ`.
//!
//! Besides the live factors an adapter keeps the factors from one step
//! earlier. The calibration matrices compare the two to transport optimizer
//! state when the low-rank subspace moves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LoftError, Result};
use crate::linalg::{gram_inverse, DenseMatrix, GramInverse};

/// How the trainable factors are initialized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// `U = 0`, `V` Gaussian; the product starts at zero.
    #[default]
    Lora,
    /// Both factors Gaussian, so both are full column rank from step one.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterRecord", into = "AdapterRecord")]
pub struct LowRankAdapter {
    w0: DenseMatrix,
    u: DenseMatrix,
    v: DenseMatrix,
    u_prev: DenseMatrix,
    v_prev: DenseMatrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    rank: usize,
    w0: DenseMatrix,
    u: DenseMatrix,
    v: DenseMatrix,
    u_prev: DenseMatrix,
    v_prev: DenseMatrix,
}

impl TryFrom<AdapterRecord> for LowRankAdapter {
    type Error = LoftError;

    fn try_from(rec: AdapterRecord) -> Result<Self> {
        let mut a = LowRankAdapter::from_factors(rec.w0, rec.u, rec.v)?;
        if a.rank() != rec.rank {
            return Err(LoftError::shape(
                "adapter checkpoint",
                format!("rank {}", rec.rank),
                format!("rank {}", a.rank()),
            ));
        }
        let (m, n, r) = (a.w0.rows(), a.w0.cols(), a.rank());
        rec.u_prev.expect_shape("adapter checkpoint u_prev", m, r)?;
        rec.v_prev.expect_shape("adapter checkpoint v_prev", n, r)?;
        a.u_prev = rec.u_prev;
        a.v_prev = rec.v_prev;
        Ok(a)
    }
}

impl From<LowRankAdapter> for AdapterRecord {
    fn from(a: LowRankAdapter) -> Self {
        AdapterRecord {
            rank: a.rank(),
            w0: a.w0,
            u: a.u,
            v: a.v,
            u_prev: a.u_prev,
            v_prev: a.v_prev,
        }
    }
}

/// Standard LoRA initialization: `V` has seeded `N(0, 1/r)` entries, `U = 0`.
pub fn init_adapter(m: usize, n: usize, r: usize, seed: u64, w0: DenseMatrix) -> Result<LowRankAdapter> {
    init_adapter_with(m, n, r, seed, w0, AdapterInit::Lora)
}

pub fn init_adapter_with(
    m: usize,
    n: usize,
    r: usize,
    seed: u64,
    w0: DenseMatrix,
    init: AdapterInit,
) -> Result<LowRankAdapter> {
    if m == 0 || n == 0 || r == 0 {
        return Err(LoftError::InvalidDimensions(format!(
            "adapter dims must be positive, got m={m}, n={n}, r={r}"
        )));
    }
    w0.expect_shape("init_adapter", m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (r as f64).sqrt();
    let v = DenseMatrix::gaussian(n, r, scale, &mut rng);
    let u = match init {
        AdapterInit::Lora => DenseMatrix::zeros(m, r),
        AdapterInit::Gaussian => DenseMatrix::gaussian(m, r, scale, &mut rng),
    };
    LowRankAdapter::from_factors(w0, u, v)
}

impl LowRankAdapter {
    /// Adapter with explicit factors; the previous iterates start equal to them.
    pub fn from_factors(w0: DenseMatrix, u: DenseMatrix, v: DenseMatrix) -> Result<Self> {
        let (m, n) = w0.shape();
        let r = u.cols();
        if r == 0 {
            return Err(LoftError::InvalidDimensions("adapter rank must be positive".into()));
        }
        u.expect_shape("LowRankAdapter U", m, r)?;
        v.expect_shape("LowRankAdapter V", n, r)?;
        Ok(LowRankAdapter {
            u_prev: u.clone(),
            v_prev: v.clone(),
            w0,
            u,
            v,
        })
    }

    /// Move to new factors, keeping the current ones as the previous
    /// iterate, as an optimizer step would. Lets callers drive the
    /// calibration machinery along an arbitrary factor path.
    pub fn advance_to(&mut self, u: DenseMatrix, v: DenseMatrix) -> Result<()> {
        let (m, n) = self.shape();
        let r = self.rank();
        u.expect_shape("advance_to U", m, r)?;
        v.expect_shape("advance_to V", n, r)?;
        self.snapshot();
        self.u = u;
        self.v = v;
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `(m, n)` of the adapted weight.
    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn u(&self) -> &DenseMatrix {
        &self.u
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn u_prev(&self) -> &DenseMatrix {
        &self.u_prev
    }

    pub fn v_prev(&self) -> &DenseMatrix {
        &self.v_prev
    }

    /// Low-rank part `U Vᵀ`.
    pub fn delta(&self) -> DenseMatrix {
        self.u.matmul_t(&self.v)
    }

    /// Gauge transform `(U, V) → (cU, V/c)` of the live factors. The product
    /// and the stored previous iterates are unchanged.
    pub fn rebalance(&mut self, c: f64) {
        assert!(c != 0.0 && c.is_finite(), "rebalance needs a finite nonzero scale");
        self.u = self.u.scale(c);
        self.v = self.v.scale(1.0 / c);
    }

    /// Record the live factors as the previous iterates. Called once per
    /// optimizer step, after calibration and before any factor changes.
    pub(crate) fn snapshot(&mut self) {
        self.u_prev.clone_from(&self.u);
        self.v_prev.clone_from(&self.v);
    }

    pub(crate) fn u_mut(&mut self) -> &mut DenseMatrix {
        &mut self.u
    }

    pub(crate) fn v_mut(&mut self) -> &mut DenseMatrix {
        &mut self.v
    }

    pub(crate) fn grams(&self) -> FactorGrams {
        FactorGrams {
            utu_inv: gram_inverse(&self.u),
            vtv_inv: gram_inverse(&self.v),
        }
    }
}

/// `W₀ + U Vᵀ`.
pub fn effective_weight(adapter: &LowRankAdapter) -> DenseMatrix {
    adapter.w0.add(&adapter.delta())
}

/// Raw factor gradients from the chain rule.
#[derive(Debug, Clone)]
pub struct FactorGrads {
    pub gu: DenseMatrix,
    pub gv: DenseMatrix,
}

/// `gU = ∇W·V`, `gV = ∇Wᵀ·U`.
pub fn factor_grads(gw: &DenseMatrix, adapter: &LowRankAdapter) -> Result<FactorGrads> {
    let (m, n) = adapter.shape();
    gw.expect_shape("factor_grads", m, n)?;
    Ok(FactorGrads {
        gu: gw.matmul(&adapter.v),
        gv: gw.t_matmul(&adapter.u),
    })
}

/// Inverted Gram matrices of both factors at the current iterate.
#[derive(Debug, Clone)]
pub struct FactorGrams {
    pub utu_inv: GramInverse,
    pub vtv_inv: GramInverse,
}

/// Scale-invariant factor gradients `g̃U = gU (VᵀV)⁻¹`, `g̃V = gV (UᵀU)⁻¹`.
#[derive(Debug, Clone)]
pub struct ScaledGrads {
    pub gu: DenseMatrix,
    pub gv: DenseMatrix,
    /// Effective rank of `V` used for `g̃U`.
    pub rank_v: usize,
    /// Effective rank of `U` used for `g̃V`.
    pub rank_u: usize,
}

impl ScaledGrads {
    pub(crate) fn scale_by(&mut self, s: f64) {
        if s != 1.0 {
            self.gu = self.gu.scale(s);
            self.gv = self.gv.scale(s);
        }
    }
}

pub fn scaled_grads(
    gu: &DenseMatrix,
    gv: &DenseMatrix,
    adapter: &LowRankAdapter,
) -> Result<ScaledGrads> {
    let (m, n) = adapter.shape();
    let r = adapter.rank();
    gu.expect_shape("scaled_grads gU", m, r)?;
    gv.expect_shape("scaled_grads gV", n, r)?;
    Ok(scaled_grads_with(gu, gv, &adapter.grams()))
}

pub(crate) fn scaled_grads_with(gu: &DenseMatrix, gv: &DenseMatrix, grams: &FactorGrams) -> ScaledGrads {
    ScaledGrads {
        gu: gu.matmul(&grams.vtv_inv.inverse),
        gv: gv.matmul(&grams.utu_inv.inverse),
        rank_v: grams.vtv_inv.rank,
        rank_u: grams.utu_inv.rank,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, projector};

    fn random_adapter(m: usize, n: usize, r: usize, seed: u64) -> LowRankAdapter {
        init_adapter_with(m, n, r, seed, DenseMatrix::zeros(m, n), AdapterInit::Gaussian).unwrap()
    }

    #[test]
    fn lora_init_starts_at_base_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w0 = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let a = init_adapter(4, 3, 2, 9, w0.clone()).unwrap();
        assert_eq!(effective_weight(&a), w0);
        assert_eq!(a.u_prev(), a.u());
        assert_eq!(a.v_prev(), a.v());
        assert_eq!(numerical_rank(a.v()), 2);
        let b = init_adapter(4, 3, 2, 9, w0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_dims_but_allows_overcomplete_rank() {
        assert!(init_adapter(0, 3, 1, 0, DenseMatrix::zeros(0, 3)).is_err());
        assert!(init_adapter(2, 3, 0, 0, DenseMatrix::zeros(2, 3)).is_err());
        assert!(init_adapter(2, 3, 1, 0, DenseMatrix::zeros(3, 2)).is_err());
        assert!(init_adapter(2, 3, 5, 0, DenseMatrix::zeros(2, 3)).is_ok());
    }

    #[test]
    fn effective_weight_single_entry() {
        let e1 = DenseMatrix::column(&[1.0, 0.0]);
        let a = LowRankAdapter::from_factors(DenseMatrix::zeros(2, 2), e1.clone(), e1).unwrap();
        let w = effective_weight(&a);
        assert_eq!(w, DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    }

    #[test]
    fn factor_grads_edge_cases() {
        let a = random_adapter(4, 3, 3, 1);
        let g = factor_grads(&DenseMatrix::zeros(4, 3), &a).unwrap();
        assert_eq!(g.gu, DenseMatrix::zeros(4, 3));
        assert_eq!(g.gv, DenseMatrix::zeros(3, 3));
        assert!(factor_grads(&DenseMatrix::zeros(3, 4), &a).is_err());

        let w0 = DenseMatrix::zeros(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let gw = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let a = LowRankAdapter::from_factors(w0, u, DenseMatrix::identity(3)).unwrap();
        assert_eq!(factor_grads(&gw, &a).unwrap().gu, gw);
    }

    #[test]
    fn scaled_grads_project_onto_factor_spaces() {
        let a = random_adapter(7, 5, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gw = DenseMatrix::gaussian(7, 5, 1.0, &mut rng);
        let fg = factor_grads(&gw, &a).unwrap();
        let sg = scaled_grads(&fg.gu, &fg.gv, &a).unwrap();
        assert_eq!((sg.rank_u, sg.rank_v), (2, 2));
        let lhs = sg.gu.matmul_t(a.v());
        assert!(lhs.dist(&gw.matmul(&projector(a.v()))) < 1e-10);
        let lhs_v = sg.gv.matmul_t(a.u());
        assert!(lhs_v.dist(&gw.transpose().matmul(&projector(a.u()))) < 1e-10);
    }

    #[test]
    fn scaled_grads_identity_for_orthonormal_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = DenseMatrix::gaussian(3, 2, 1.0, &mut rng);
        let v = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let a = LowRankAdapter::from_factors(DenseMatrix::zeros(3, 3), u, v).unwrap();
        let gw = DenseMatrix::gaussian(3, 3, 1.0, &mut rng);
        let fg = factor_grads(&gw, &a).unwrap();
        let sg = scaled_grads(&fg.gu, &fg.gv, &a).unwrap();
        assert!(sg.gu.dist(&fg.gu) < 1e-14);
    }

    #[test]
    fn rebalance_keeps_product_and_prev() {
        let mut a = random_adapter(5, 4, 2, 8);
        let before = effective_weight(&a);
        let prev = a.v_prev().clone();
        a.rebalance(10.0);
        assert!(effective_weight(&a).dist(&before) < 1e-12 * before.fro_norm().max(1.0));
        assert_eq!(a.v_prev(), &prev);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let a = random_adapter(3, 2, 2, 12);
        let json = serde_json::to_string(&a).unwrap();
        let back: LowRankAdapter = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["rank"] = 3.into();
        assert!(serde_json::from_value::<LowRankAdapter>(value).is_err());
    }
}
