//! Synthetic matrix-factorization objectives with closed-form gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LoftError, Result};
use crate::linalg::{svd, DenseMatrix, Svd};

/// Scaling of the squared-error loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// `‖W − A‖²_F`, gradient `2(W − A)`.
    #[default]
    Full,
    /// `½‖W − A‖²_F`, gradient `W − A`.
    Half,
}

impl LossConvention {
    pub fn factor(self) -> f64 {
        match self {
            LossConvention::Full => 1.0,
            LossConvention::Half => 0.5,
        }
    }
}

/// A rank-`r_A` target matrix with its SVD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixTarget {
    pub a: DenseMatrix,
    pub true_rank: usize,
    pub seed: u64,
    pub svd: Svd,
}

/// `A = G₁ G₂ᵀ` with seeded standard-normal `G₁` (`m×r_A`) and `G₂` (`n×r_A`).
pub fn gen_rank_r_target(m: usize, n: usize, r_a: usize, seed: u64) -> Result<MatrixTarget> {
    if m == 0 || n == 0 {
        return Err(LoftError::InvalidDimensions(format!("target must be non-empty, got {m}x{n}")));
    }
    if r_a == 0 || r_a > m.min(n) {
        return Err(LoftError::InvalidDimensions(format!(
            "target rank must lie in 1..={}, got {r_a}",
            m.min(n)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g1 = DenseMatrix::gaussian(m, r_a, 1.0, &mut rng);
    let g2 = DenseMatrix::gaussian(n, r_a, 1.0, &mut rng);
    let a = g1.matmul_t(&g2);
    let svd = svd(&a);
    Ok(MatrixTarget {
        a,
        true_rank: r_a,
        seed,
        svd,
    })
}

impl MatrixTarget {
    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    /// Best achievable loss at rank `r` (Eckart–Young): the tail energy
    /// `Σ_{i>r} σᵢ²` under the given convention.
    pub fn rank_r_optimum(&self, r: usize, conv: LossConvention) -> f64 {
        conv.factor() * self.svd.singular_values.iter().skip(r).map(|s| s * s).sum::<f64>()
    }

    /// Truncated SVD `Ũ_r Σ_r Ṽ_rᵀ`.
    pub fn best_rank_r(&self, r: usize) -> DenseMatrix {
        let u = self.svd.u.take_cols(r);
        let v = self.svd.v.take_cols(r);
        let us = DenseMatrix::from_fn(u.rows(), r, |i, j| u[(i, j)] * self.svd.singular_values[j]);
        us.matmul_t(&v)
    }
}

/// Loss and gradient of the squared error to the target.
pub fn mf_loss_grad(w: &DenseMatrix, target: &MatrixTarget, conv: LossConvention) -> Result<(f64, DenseMatrix)> {
    let (m, n) = target.shape();
    w.expect_shape("mf_loss_grad", m, n)?;
    let resid = w.sub(&target.a);
    let loss = conv.factor() * resid.fro_norm_sq();
    let grad = resid.scale(2.0 * conv.factor());
    Ok((loss, grad))
}

/// Factors starting inside the target's leading singular subspaces:
/// `U₀ = Ũ_r X₀`, `V₀ = Ṽ_r Y₀` with seeded Gaussian `r×r` `X₀`, `Y₀`.
pub fn subspace_init(target: &MatrixTarget, r: usize, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    if r == 0 || r > target.true_rank {
        return Err(LoftError::InvalidDimensions(format!(
            "subspace rank must lie in 1..={}, got {r}",
            target.true_rank
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = DenseMatrix::gaussian(r, r, 1.0, &mut rng);
    let y0 = DenseMatrix::gaussian(r, r, 1.0, &mut rng);
    Ok(subspace_init_with(target, &x0, &y0))
}

/// `U₀ = Ũ_r X₀`, `V₀ = Ṽ_r Y₀` for explicit cores.
pub fn subspace_init_with(target: &MatrixTarget, x0: &DenseMatrix, y0: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let r = x0.rows();
    (
        target.svd.u.take_cols(r).matmul(x0),
        target.svd.v.take_cols(r).matmul(y0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numerical_rank, projector};

    #[test]
    fn rank_and_determinism() {
        let t = gen_rank_r_target(8, 5, 2, 7).unwrap();
        assert_eq!(numerical_rank(&t.a), 2);
        assert_eq!(t.svd.rank(), 2);
        assert_eq!(gen_rank_r_target(8, 5, 2, 7).unwrap(), t);
        assert_eq!(numerical_rank(&gen_rank_r_target(6, 4, 4, 1).unwrap().a), 4);
        assert!(gen_rank_r_target(4, 4, 0, 0).is_err());
        assert!(gen_rank_r_target(4, 3, 4, 0).is_err());
    }

    #[test]
    fn loss_conventions() {
        let t = MatrixTarget {
            a: DenseMatrix::identity(2),
            true_rank: 2,
            seed: 0,
            svd: svd(&DenseMatrix::identity(2)),
        };
        let (l, g) = mf_loss_grad(&DenseMatrix::zeros(2, 2), &t, LossConvention::Half).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, DenseMatrix::identity(2).scale(-1.0));
        let (l, g) = mf_loss_grad(&DenseMatrix::zeros(2, 2), &t, LossConvention::Full).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, DenseMatrix::identity(2).scale(-2.0));
        let (l, g) = mf_loss_grad(&t.a, &t, LossConvention::Full).unwrap();
        assert_eq!((l, g), (0.0, DenseMatrix::zeros(2, 2)));
        assert!(mf_loss_grad(&DenseMatrix::zeros(3, 2), &t, LossConvention::Full).is_err());
    }

    #[test]
    fn subspace_init_lives_in_leading_subspaces() {
        let t = gen_rank_r_target(7, 6, 3, 2).unwrap();
        let (u0, v0) = subspace_init(&t, 2, 5).unwrap();
        let pu = projector(&t.svd.u.take_cols(2));
        let pv = projector(&t.svd.v.take_cols(2));
        assert!(pu.matmul(&u0).dist(&u0) < 1e-10);
        assert!(pv.matmul(&v0).dist(&v0) < 1e-10);
        assert!(subspace_init(&t, 4, 0).is_err());
    }

    #[test]
    fn sigma_core_gives_eckart_young_approximation() {
        let t = gen_rank_r_target(6, 5, 3, 9).unwrap();
        let sigma = DenseMatrix::from_diag(&t.svd.singular_values[..2]);
        let (u0, v0) = subspace_init_with(&t, &sigma, &DenseMatrix::identity(2));
        let w = u0.matmul_t(&v0);
        assert!(w.dist(&t.best_rank_r(2)) < 1e-10);
        let (l, _) = mf_loss_grad(&w, &t, LossConvention::Half).unwrap();
        assert!((l - t.rank_r_optimum(2, LossConvention::Half)).abs() < 1e-10);
    }
}
