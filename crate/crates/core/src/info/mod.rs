//! Matrix-based Rényi entropy and mutual information on batches of
//! representations.

pub mod eigen;
mod gram;
mod trace;

pub use gram::{
    gram, joint_gram, kernel_matrix, matrix_entropy, mutual_information, GramMatrix, MaskMatrix, EIGEN_CLIP,
    NEGATIVE_EIGEN_TOLERANCE,
};
pub use trace::{token_ib_value, IBTrace, IbEntry, TimestepReps};
