//! Singular value decomposition and the Gram-inverse/projector machinery
//! built on it.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;

/// Thin SVD `M = U·diag(s)·Vᵀ` with singular values sorted in descending
/// order and a deterministic sign convention: the largest-magnitude entry
/// of every left singular vector is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svd {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl Svd {
    /// Rank cutoff `max(p, r)·ε·σ_max`.
    pub fn cutoff(&self) -> f64 {
        let (p, r) = (self.u.rows(), self.v.rows());
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        p.max(r) as f64 * f64::EPSILON * smax
    }

    pub fn rank(&self) -> usize {
        let tol = self.cutoff();
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }
}

fn nan_svd(m: &DenseMatrix) -> Svd {
    let k = m.rows().min(m.cols());
    Svd {
        u: DenseMatrix::from_fn(m.rows(), k, |_, _| f64::NAN),
        singular_values: vec![f64::NAN; k],
        v: DenseMatrix::from_fn(m.cols(), k, |_, _| f64::NAN),
    }
}

/// Non-finite input, which never converges, yields an all-NaN
/// decomposition so callers fail on their own finiteness checks.
pub fn svd(m: &DenseMatrix) -> Svd {
    if !m.is_finite() {
        return nan_svd(m);
    }
    let k = m.rows().min(m.cols());
    if k == 0 {
        return Svd {
            u: DenseMatrix::zeros(m.rows(), 0),
            singular_values: vec![],
            v: DenseMatrix::zeros(m.cols(), 0),
        };
    }
    let mat = Mat::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)]);
    let Ok(dec) = mat.thin_svd() else {
        return nan_svd(m);
    };
    let (u, v) = (dec.U(), dec.V());
    let s: Vec<f64> = (0..k).map(|i| dec.S().column_vector()[i]).collect();

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let k = order.len();
    let mut u_out = DenseMatrix::zeros(m.rows(), k);
    let mut v_out = DenseMatrix::zeros(m.cols(), k);
    let mut sv = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0.0f64;
        for i in 0..m.rows() {
            if u[(i, src)].abs() > pivot.abs() {
                pivot = u[(i, src)];
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m.rows() {
            u_out[(i, dst)] = sign * u[(i, src)];
        }
        for j in 0..m.cols() {
            v_out[(j, dst)] = sign * v[(j, src)];
        }
        sv.push(s[src]);
    }
    Svd {
        u: u_out,
        singular_values: sv,
        v: v_out,
    }
}

/// Number of singular values above the standard cutoff.
pub fn numerical_rank(m: &DenseMatrix) -> usize {
    svd(m).rank()
}

/// `(MᵀM)⁻¹`, or its Moore–Penrose pseudo-inverse, with the effective rank.
#[derive(Debug, Clone)]
pub struct GramInverse {
    pub inverse: DenseMatrix,
    /// `(MᵀM)(MᵀM)⁺`, the projector onto the retained right singular
    /// vectors, formed directly from them; the identity at full rank.
    pub range: DenseMatrix,
    pub rank: usize,
}

impl GramInverse {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.inverse.rows()
    }
}

/// Inverse of the Gram matrix `MᵀM` of a `p×r` matrix.
///
/// Computed from the SVD of `M` itself, `V·diag(σ⁻²)·Vᵀ`, so the error
/// stays relative to `cond(M)²` instead of the squared machine epsilon
/// lost by forming `MᵀM` first. Singular values at or below the cutoff
/// are dropped, which yields the pseudo-inverse for rank-deficient input.
pub fn gram_inverse(m: &DenseMatrix) -> GramInverse {
    let r = m.cols();
    let dec = svd(m);
    let tol = dec.cutoff();
    let mut inverse = DenseMatrix::zeros(r, r);
    let mut range = DenseMatrix::zeros(r, r);
    let mut rank = 0;
    for (k, &s) in dec.singular_values.iter().enumerate() {
        if s <= tol || s == 0.0 {
            continue;
        }
        rank += 1;
        let w = 1.0 / (s * s);
        for i in 0..r {
            let vik = dec.v[(i, k)];
            if vik == 0.0 {
                continue;
            }
            for j in 0..r {
                inverse[(i, j)] += vik * w * dec.v[(j, k)];
                range[(i, j)] += vik * dec.v[(j, k)];
            }
        }
    }
    if rank == r {
        range = DenseMatrix::identity(r);
    }
    GramInverse { inverse, range, rank }
}

/// Orthogonal projector `M (MᵀM)⁻¹ Mᵀ` onto the column space of `M`.
pub fn projector(m: &DenseMatrix) -> DenseMatrix {
    let gi = gram_inverse(m);
    m.matmul(&gi.inverse).matmul_t(m)
}
