//! Dense matrix kernels and the structured products the optimizers use.

mod decomp;
mod matrix;
mod products;

pub use decomp::{gram_inverse, numerical_rank, projector, svd, GramInverse, Svd};
pub use matrix::DenseMatrix;
pub use products::{
    face_split_rows, khatri_rao_cols, kron, lowrank_fro_norm, row_square_khatri_rao,
};

pub(crate) use products::{face_split_unchecked, lowrank_fro_norm_sq_gram};
