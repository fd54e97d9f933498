//! Dense matrices, a reverse-mode tape, and symmetric eigendecomposition.

pub mod eig;
mod matrix;
mod tape;

pub use eig::{eig_sym, eig_sym_backward, eig_sym_top, min_eigengap, SymEigen, Tridiagonal};
pub use matrix::Matrix;
pub use tape::{NodeId, Tape};
