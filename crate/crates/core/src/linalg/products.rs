//! Structured products: Kronecker (⊗), column-wise Khatri-Rao (∗) and the
//! row-wise face-splitting product (•).
//!
//! Index conventions follow the Kronecker product throughout: for row
//! vectors `a` (length `r`) and `b` (length `s`), `kron(a, b)[α·s + β] =
//! a[α]·b[β]`. With this layout the mixed-product rules
//!
//! ```text
//! (A • B)(C ⊗ D) = (AC) • (BD)
//! (AB) ⊙ (CD)    = (A • C)(B ∗ D)
//! ```
//!
//! hold entrywise, which is what lets the optimizer store second-moment
//! cross terms in factor coordinates.

use crate::error::{LoftError, Result};
use crate::linalg::DenseMatrix;

/// Kronecker product of a `p×q` and an `s×t` matrix, giving `ps×qt`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (p, q) = a.shape();
    let (s, t) = b.shape();
    let mut out = DenseMatrix::zeros(p * s, q * t);
    let width = q * t;
    let data = out.data_mut();
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..s {
                let row = (i * s + k) * width + j * t;
                for (o, &bkl) in data[row..row + t].iter_mut().zip(b.row(k)) {
                    *o = aij * bkl;
                }
            }
        }
    }
    out
}

/// Column-wise Khatri-Rao product `A ∗ B`: column `j` is `kron(col_j(A), col_j(B))`.
pub fn khatri_rao_cols(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.cols() {
        return Err(LoftError::shape(
            "khatri_rao_cols",
            format!("{} columns", a.cols()),
            format!("{} columns", b.cols()),
        ));
    }
    let (p, r) = a.shape();
    let q = b.rows();
    Ok(DenseMatrix::from_fn(p * q, r, |row, j| {
        a[(row / q, j)] * b[(row % q, j)]
    }))
}

/// Face-splitting product `A • B`: row `i` is `kron(row_i(A), row_i(B))`.
pub fn face_split_rows(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(LoftError::shape(
            "face_split_rows",
            format!("{} rows", a.rows()),
            format!("{} rows", b.rows()),
        ));
    }
    Ok(face_split_unchecked(a, b))
}

pub(crate) fn face_split_unchecked(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (p, r) = a.shape();
    let s = b.cols();
    let mut out = DenseMatrix::zeros(p, r * s);
    let data = out.data_mut();
    for i in 0..p {
        let bi = b.row(i);
        for (alpha, &aia) in a.row(i).iter().enumerate() {
            let start = i * r * s + alpha * s;
            for (o, &bib) in data[start..start + s].iter_mut().zip(bi) {
                *o = aia * bib;
            }
        }
    }
    out
}

/// The `r²×n` matrix `Vᵀ ∗ Vᵀ` whose column `j` is `kron(row_j(V), row_j(V))`.
///
/// Right-multiplying a face-split accumulator by this matrix yields the
/// elementwise square of the reconstructed full-space product.
pub fn row_square_khatri_rao(v: &DenseMatrix) -> DenseMatrix {
    let (n, r) = v.shape();
    DenseMatrix::from_fn(r * r, n, |idx, j| v[(j, idx / r)] * v[(j, idx % r)])
}

/// `‖U Vᵀ‖_F` from the two `r×r` Gram matrices, without forming `U Vᵀ`.
pub fn lowrank_fro_norm(u: &DenseMatrix, v: &DenseMatrix) -> Result<f64> {
    if u.cols() != v.cols() {
        return Err(LoftError::shape(
            "lowrank_fro_norm",
            format!("rank {}", u.cols()),
            format!("rank {}", v.cols()),
        ));
    }
    Ok(lowrank_fro_norm_sq_gram(&u.t_matmul(u), &v.t_matmul(v)).sqrt())
}

/// `tr(UtU · VtV)` clamped at zero; both inputs are symmetric so the trace
/// is the entrywise dot product.
pub(crate) fn lowrank_fro_norm_sq_gram(utu: &DenseMatrix, vtv: &DenseMatrix) -> f64 {
    let tr: f64 = utu
        .data()
        .iter()
        .zip(vtv.data())
        .map(|(a, b)| a * b)
        .sum();
    tr.max(0.0)
}
