//! Brute-force oracles shared by the integration tests. Everything here is
//! deliberately naive: dense, explicit, and independent of the library's
//! SVD-based kernels.
#![allow(dead_code)]

use loft::linalg::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::gaussian(rows, cols, 1.0, r)
}

/// `‖a − b‖ / max(1, ‖b‖)`.
pub fn rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.dist(b) / b.fro_norm().max(1.0)
}

/// Running maximum where NaN counts as infinitely bad.
pub fn worse(acc: f64, r: f64) -> f64 {
    if r.is_nan() {
        f64::INFINITY
    } else {
        acc.max(r)
    }
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = m[col][col];
        for j in 0..n {
            m[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[i][col];
            for j in 0..n {
                m[i][j] -= f * m[col][j];
                inv[i][j] -= f * inv[col][j];
            }
        }
    }
    DenseMatrix::from_fn(n, n, |i, j| inv[i][j])
}

/// `M (MᵀM)⁻¹ Mᵀ` via elimination.
pub fn projector(m: &DenseMatrix) -> DenseMatrix {
    m.matmul(&inverse(&m.t_matmul(m))).matmul_t(m)
}

/// Dense quintic Newton–Schulz on `G`, written out term by term.
pub fn dense_ns5(g: &DenseMatrix, steps: usize, eps: f64) -> DenseMatrix {
    let (a, b, c) = (3.4445, -4.7750, 2.0315);
    let mut x = g.scale(1.0 / (g.fro_norm() + eps));
    for _ in 0..steps {
        let s = x.matmul_t(&x);
        let s2 = s.matmul(&s);
        x = x.scale(a).add(&s.matmul(&x).scale(b)).add(&s2.matmul(&x).scale(c));
    }
    x
}

/// Least-squares optimum of `½‖U Vᵀ − A‖²` over `U` with `V` fixed.
pub fn als_u_optimum(a: &DenseMatrix, v: &DenseMatrix) -> f64 {
    let u = a.matmul(v).matmul(&inverse(&v.t_matmul(v)));
    0.5 * u.matmul_t(v).sub(a).fro_norm_sq()
}

/// Least-squares optimum of `½‖U Vᵀ − A‖²` over `V` with `U` fixed.
pub fn als_v_optimum(a: &DenseMatrix, u: &DenseMatrix) -> f64 {
    let v = a.t_matmul(u).matmul(&inverse(&u.t_matmul(u)));
    0.5 * u.matmul_t(&v).sub(a).fro_norm_sq()
}

/// Eckart–Young tail `½ Σ_{i>r} σᵢ²` computed from the eigenvalues of
/// `AᵀA` by Jacobi rotation, independent of the library SVD.
pub fn half_tail_energy(a: &DenseMatrix, r: usize) -> f64 {
    let mut s: Vec<f64> = symmetric_eigenvalues(&a.t_matmul(a));
    s.sort_by(|x, y| y.total_cmp(x));
    0.5 * s.iter().skip(r).map(|&l| l.max(0.0)).sum::<f64>()
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Reference AdamW (bias-corrected, ε outside the root, decoupled decay).
pub struct AdamW {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub t: i32,
}

impl AdamW {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamW { m: DenseMatrix::zeros(rows, cols), v: DenseMatrix::zeros(rows, cols), t: 0 }
    }

    pub fn step(&mut self, w: &mut DenseMatrix, g: &DenseMatrix, eta: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
        self.t += 1;
        self.m = self.m.scale(b1).add(&g.scale(1.0 - b1));
        self.v = self.v.scale(b2).add(&g.hadamard(g).scale(1.0 - b2));
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let step = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
            (self.m[(i, j)] / c1) / ((self.v[(i, j)] / c2).sqrt() + eps)
        });
        *w = w.scale(1.0 - wd * eta).sub(&step.scale(eta));
    }
}
