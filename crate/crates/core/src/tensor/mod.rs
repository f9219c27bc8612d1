//! Dense row-major matrices and a small reverse-mode tape.
//!
//! Everything the backbone and the four training objectives need: products,
//! row-bias addition, rectifier, row normalization, transposition, column
//! concatenation, row-wise dot products and fused scalar heads whose local
//! Jacobians are supplied by the caller.

mod matrix;
mod tape;

pub use matrix::{cosine_similarity, dot, l2_norm, l2_normalize, Matrix, NORM_EPS};
pub use tape::{Gradients, Tape, Var};
